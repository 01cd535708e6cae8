//! Singular value decomposition, energy scores and the spectrum split that
//! seeds an adapter.
//!
//! The decomposition is a one-sided (Hestenes) Jacobi iteration on the
//! columns of whichever of `W` / `Wᵀ` has fewer columns, always computed in
//! `f64`.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

/// Entries below this magnitude are skipped when picking a column sign.
const SIGN_EPS: f64 = 1e-10;

/// `W = U · diag(sigma) · Vᵀ` with `U: d_in×k`, `V: d_out×k`,
/// `k = min(d_in, d_out)` and `sigma` descending.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SpectralDecomposition {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    pub fn d_in(&self) -> usize {
        self.u.rows()
    }

    pub fn d_out(&self) -> usize {
        self.v.rows()
    }

    /// `Σ_{i ∈ idx} σ_i · u_i · v_iᵀ`.
    pub fn partial_product(&self, idx: std::ops::Range<usize>) -> Tensor {
        let (m, n) = (self.d_in(), self.d_out());
        let mut out = Tensor::zeros(&[m, n]);
        let data = out.data_mut();
        for c in idx {
            let s = self.sigma[c];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, c) * s;
                if us == 0.0 {
                    continue;
                }
                let row = &mut data[i * n..(i + 1) * n];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(j, c);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        self.partial_product(0..self.sigma.len())
    }

    pub fn total_energy(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// Computes the thin SVD of a finite matrix.
pub fn svd(w: &Tensor) -> Result<SpectralDecomposition> {
    if !w.is_matrix() {
        return Err(Error::shape("svd", w.shape(), &[]));
    }
    w.ensure_finite("svd input")?;
    let (d_in, d_out) = (w.rows(), w.cols());

    // Orthogonalize the columns of a tall matrix M (p×q, p ≥ q):
    // M·V = U·Σ. For a wide W we work on Wᵀ and swap the factors.
    let tall = d_in >= d_out;
    let (p, q) = if tall { (d_in, d_out) } else { (d_out, d_in) };
    let mut cols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            (0..p)
                .map(|i| if tall { w.get(i, j) } else { w.get(j, i) })
                .collect()
        })
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    let frob = w.frobenius_norm();
    let negligible = (f64::EPSILON * frob).powi(2);

    let mut converged = q < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[i], &cols[j]);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= JACOBI_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    // Left vectors of M: normalized columns, with an orthonormal completion
    // for numerically null directions.
    let thresh = negligible.sqrt();
    let mut left: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = sigma[j];
            (s > thresh).then(|| cols[j].iter().map(|x| x / s).collect())
        })
        .collect();
    complete_orthonormal(&mut left, p);
    let left: Vec<Vec<f64>> = left.into_iter().map(|c| c.expect("completed")).collect();
    let right: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let (mut ucols, mut vcols) = if tall { (left, right) } else { (right, left) };
    for (uc, vc) in ucols.iter_mut().zip(vcols.iter_mut()) {
        if let Some(&first) = uc.iter().find(|x| x.abs() > SIGN_EPS) {
            if first < 0.0 {
                uc.iter_mut().for_each(|x| *x = -*x);
                vc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    Ok(SpectralDecomposition {
        u: from_columns(&ucols, d_in)?,
        sigma,
        v: from_columns(&vcols, d_out)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by twice-repeated Gram–Schmidt.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        loop {
            assert!(candidate < dim, "ran out of basis vectors");
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&v, other);
                    v.iter_mut().zip(other).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 0.5 {
                v.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(v);
                break;
            }
        }
    }
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Result<Tensor> {
    let k = cols.len();
    let mut data = vec![0.0; rows * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * k + j] = x;
        }
    }
    Tensor::matrix(rows, k, data)
}

/// Adapter seed cut from a spectrum: `A` carries the singular values,
/// `B` keeps orthonormal rows, and `w_res` holds every other component.
#[derive(Debug, Clone)]
pub struct SpectrumSplit {
    pub a: Tensor,
    pub b: Tensor,
    pub w_res: Tensor,
    pub rank: usize,
}

fn check_split(dec: &SpectralDecomposition, w: &Tensor, r: usize) -> Result<()> {
    if w.shape() != [dec.d_in(), dec.d_out()] {
        return Err(Error::shape(
            "split_spectrum",
            w.shape(),
            &[dec.d_in(), dec.d_out()],
        ));
    }
    let k = dec.rank_bound();
    if r == 0 || r > k {
        return Err(Error::config(format!(
            "rank {r} out of range 1..={k} for a {}x{} weight",
            dec.d_in(),
            dec.d_out()
        )));
    }
    Ok(())
}

fn split_at(dec: &SpectralDecomposition, adapter: std::ops::Range<usize>) -> Result<SpectrumSplit> {
    let (d_in, d_out) = (dec.d_in(), dec.d_out());
    let r = adapter.len();
    let mut a = Tensor::zeros(&[d_in, r]);
    let mut b = Tensor::zeros(&[r, d_out]);
    for (c, comp) in adapter.clone().enumerate() {
        for i in 0..d_in {
            a.set(i, c, dec.u.get(i, comp) * dec.sigma[comp]);
        }
        for j in 0..d_out {
            b.set(c, j, dec.v.get(j, comp));
        }
    }
    let k = dec.rank_bound();
    let mut w_res = dec.partial_product(0..adapter.start);
    w_res.add_assign(&dec.partial_product(adapter.end..k))?;
    Ok(SpectrumSplit {
        a,
        b,
        w_res,
        rank: r,
    })
}

/// Adapter from the `r` leading components; the residual keeps the rest.
pub fn split_spectrum(dec: &SpectralDecomposition, w: &Tensor, r: usize) -> Result<SpectrumSplit> {
    check_split(dec, w, r)?;
    split_at(dec, 0..r)
}

/// Adapter from the `r` trailing (smallest) components; the residual keeps
/// the leading `k − r`.
pub fn split_spectrum_tail(
    dec: &SpectralDecomposition,
    w: &Tensor,
    r: usize,
) -> Result<SpectrumSplit> {
    check_split(dec, w, r)?;
    let k = dec.rank_bound();
    split_at(dec, k - r..k)
}

/// Sum of the squares of the `r` leading singular values.
pub fn energy_score(sigma: &[f64], r: usize) -> Result<f64> {
    if r > sigma.len() {
        return Err(Error::config(format!(
            "energy rank {r} exceeds spectrum length {}",
            sigma.len()
        )));
    }
    Ok(sigma[..r].iter().map(|s| s * s).sum())
}

/// `energy_score(sigma, r) / energy_score(sigma, len)`; zero for a zero
/// spectrum.
pub fn normalized_energy(sigma: &[f64], r: usize) -> Result<f64> {
    let total = energy_score(sigma, sigma.len())?;
    let part = energy_score(sigma, r)?;
    Ok(if total > 0.0 { part / total } else { 0.0 })
}
