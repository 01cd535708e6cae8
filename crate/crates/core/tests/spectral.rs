mod common;

use common::{random_matrix, singular_values_oracle, symmetric_eigenvalues};
use lamda_core::spectral::{normalized_energy, split_spectrum, svd};
use lamda_core::{Precision, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn eigen_oracle_on_known_matrix() {
    // [[2,1],[1,2]] has eigenvalues 3 and 1
    let ev = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
    assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
}

#[test]
fn singular_values_match_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (m, n) in [(5, 5), (7, 3), (3, 9), (20, 12), (1, 6), (6, 1)] {
        let w = random_matrix(m, n, &mut rng);
        let got = svd(&w).unwrap().sigma;
        let want = singular_values_oracle(&w);
        assert_eq!(got.len(), m.min(n));
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-10 * want[0].max(1.0), "{m}x{n}: {g} vs {e}");
        }
    }
}

#[test]
fn identity_energy_is_linear() {
    let s = svd(&Tensor::eye(16)).unwrap().sigma;
    for r in 1..=16 {
        assert!((normalized_energy(&s, r).unwrap() - r as f64 / 16.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decomposition_invariants(m in 1usize..24, n in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(m, n, &mut rng).rounded(Precision::F32);
        let d = svd(&w).unwrap();
        let norm = w.frobenius_norm().max(1e-300);
        prop_assert!(d.reconstruct().sub(&w).unwrap().frobenius_norm() / norm < 1e-10);
        prop_assert!(d.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(d.sigma.iter().all(|&s| s >= 0.0));
        let k = m.min(n);
        let eye = Tensor::eye(k);
        prop_assert!(d.u.t_matmul(&d.u).unwrap().max_abs_diff(&eye) < 1e-10);
        prop_assert!(d.v.t_matmul(&d.v).unwrap().max_abs_diff(&eye) < 1e-10);
    }

    #[test]
    fn head_split_reconstructs(m in 2usize..20, n in 2usize..20, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(m, n, &mut rng);
        let d = svd(&w).unwrap();
        let r = 1 + ((m.min(n) - 1) as f64 * frac) as usize;
        let s = split_spectrum(&d, &w, r).unwrap();
        let back = s.w_res.add(&s.a.matmul(&s.b).unwrap()).unwrap();
        prop_assert!(back.sub(&w).unwrap().frobenius_norm() / w.frobenius_norm() < 1e-10);
        // B rows are orthonormal
        prop_assert!(s.b.matmul_t(&s.b).unwrap().max_abs_diff(&Tensor::eye(r)) < 1e-10);
    }

    #[test]
    fn energy_is_monotone(sig in proptest::collection::vec(0.0f64..5.0, 1..20)) {
        let mut sig = sig;
        sig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let e: Vec<f64> = (0..=sig.len()).map(|r| normalized_energy(&sig, r).unwrap()).collect();
        prop_assert!(e.windows(2).all(|p| p[0] <= p[1] + 1e-15));
    }
}
