//! Reference implementations the library is checked against. Nothing here
//! calls into the code under test except to read tensor contents.
#![allow(dead_code)]

use lamda_core::allocator::{ModuleId, RankBudget};
use lamda_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Row-major `Vec<Vec<f64>>` view.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// descending.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn singular_values_oracle(w: &Tensor) -> Vec<f64> {
    let a = rows(w);
    let at = transpose(&a);
    let gram = if a.len() <= at.len() {
        naive_matmul(&a, &at)
    } else {
        naive_matmul(&at, &a)
    };
    symmetric_eigenvalues(gram)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Central finite difference of `f` along every entry of `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// Ranks by explicit comparison counting: a module's position is the
/// number of modules that sort strictly before it, and quantile `q`
/// receives the `q`-th largest candidate rank.
pub fn brute_force_ranks(modules: &[(ModuleId, f64)], budget: &RankBudget, reverse: bool) -> Vec<(ModuleId, usize)> {
    let l = modules.len();
    let s = budget.ranks.len();
    modules
        .iter()
        .map(|&(id, nu)| {
            let pos = modules
                .iter()
                .filter(|&&(other, onu)| onu < nu || (onu == nu && other < id))
                .count();
            let q = (0..s)
                .find(|&q| q * l / s <= pos && pos < (q + 1) * l / s)
                .expect("every position falls in a quantile");
            let rank = if reverse { budget.ranks[q] } else { budget.ranks[s - 1 - q] };
            (id, rank)
        })
        .collect()
}
