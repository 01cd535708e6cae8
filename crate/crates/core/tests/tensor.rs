mod common;

use common::{naive_matmul, rows, transpose};
use lamda_core::graph::Graph;
use lamda_core::{Precision, Tensor};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(m, k, n)| {
        (
            proptest::collection::vec(-10.0f64..10.0, m * k),
            proptest::collection::vec(-10.0f64..10.0, k * n),
        )
            .prop_map(move |(a, b)| (Tensor::matrix(m, k, a).unwrap(), Tensor::matrix(k, n, b).unwrap()))
    })
}

fn close(a: &Tensor, b: &[Vec<f64>]) -> bool {
    let scale = b.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    rows(a).iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= 1e-12 * scale)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in pair(12)) {
        let expect = naive_matmul(&rows(&a), &rows(&b));
        prop_assert!(close(&a.matmul(&b).unwrap(), &expect));
        prop_assert!(close(&a.transpose().unwrap().t_matmul(&b).unwrap(), &expect));
        prop_assert!(close(&a.matmul_t(&b.transpose().unwrap()).unwrap(), &expect));
    }

    #[test]
    fn transpose_is_an_involution(a in matrix(10)) {
        let t = a.transpose().unwrap();
        prop_assert_eq!(rows(&t), transpose(&rows(&a)));
        prop_assert_eq!(t.transpose().unwrap(), a);
    }

    #[test]
    fn f32_rounding_is_idempotent(a in matrix(8)) {
        let once = a.clone().rounded(Precision::F32);
        prop_assert_eq!(once.clone().rounded(Precision::F32), once.clone());
        prop_assert!(once.max_abs_diff(&a) <= 10.0 * f32::EPSILON as f64);
    }

    #[test]
    fn softmax_rows_sum_to_one(a in matrix(8), causal in any::<bool>()) {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(a.clone());
        let p = g.softmax_rows(v, causal).unwrap();
        let p = g.value(p);
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            if causal {
                prop_assert!(p.row(i)[(i + 1).min(p.cols())..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn mismatched_matmul_reports_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}
