//! Adam with per-parameter row limits.
//!
//! A parameter may be marked as trainable only in its leading `k` rows.
//! Rows at or beyond `k` are never written, and their moment buffers are
//! dropped, so optimizer state shrinks as rows freeze.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

/// First and second moments for the live prefix of a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far; drives bias correction.
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    precision: Precision,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, precision: Precision) -> Self {
        Adam {
            config,
            precision,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }

    /// Scalars held in moment buffers (two per live trainable scalar).
    pub fn state_scalars(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    /// Drops buffers for parameters that are no longer trained.
    pub fn forget(&mut self, name: &str) {
        self.state.remove(name);
    }

    /// Applies one update to the first `live_rows` rows of `param`
    /// (all rows when `None`).
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        live_rows: Option<usize>,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        grad.ensure_finite(name)?;
        let cols = param.cols();
        let rows = live_rows.unwrap_or(param.rows()).min(param.rows());
        let live = if param.is_matrix() { rows * cols } else if rows > 0 { param.len() } else { 0 };
        if live == 0 {
            self.state.remove(name);
            return Ok(());
        }
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; live],
            v: vec![0.0; live],
            steps: 0,
        });
        if entry.m.len() > live {
            entry.m.truncate(live);
            entry.v.truncate(live);
        } else if entry.m.len() < live {
            return Err(Error::Contract(format!("{name}: frozen rows cannot resume training")));
        }
        entry.steps += 1;
        let (b1, b2) = self.config.betas;
        let lr = self.config.learning_rate;
        let eps = self.config.eps;
        let c1 = 1.0 - b1.powi(entry.steps as i32);
        let c2 = 1.0 - b2.powi(entry.steps as i32);
        let p = self.precision;
        let data = param.data_mut();
        for i in 0..live {
            let g = grad.data()[i];
            let m = p.round(b1 * entry.m[i] + (1.0 - b1) * g);
            let v = p.round(b2 * entry.v[i] + (1.0 - b2) * g * g);
            entry.m[i] = m;
            entry.v[i] = v;
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            data[i] = p.round(data[i] - update);
        }
        if !param.data()[..live].iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("{name} became non-finite")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::new(0.0), Precision::F32);
        let mut p = Tensor::from_rows(&[&[0.1, 0.2], &[0.3, 0.4]]).unwrap().rounded(Precision::F32);
        let before = p.clone();
        let g = Tensor::full(&[2, 2], 3.0);
        for _ in 0..10 {
            adam.step("p", &mut p, &g, None).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::new(0.1), Precision::F64);
        let mut p = Tensor::zeros(&[1, 3]);
        let g = Tensor::from_rows(&[&[2.0, -5.0, 0.0]]).unwrap();
        adam.step("p", &mut p, &g, None).unwrap();
        assert!((p.get(0, 0) + 0.1).abs() < 1e-6);
        assert!((p.get(0, 1) - 0.1).abs() < 1e-6);
        assert_eq!(p.get(0, 2), 0.0);
    }

    #[test]
    fn row_limit_freezes_and_shrinks_state() {
        let mut adam = Adam::new(AdamConfig::new(0.01), Precision::F64);
        let mut p = Tensor::full(&[4, 2], 1.0);
        let g = Tensor::full(&[4, 2], 1.0);
        adam.step("b", &mut p, &g, Some(4)).unwrap();
        assert_eq!(adam.state_scalars(), 16);
        let frozen: Vec<f64> = p.data()[4..].to_vec();
        adam.step("b", &mut p, &g, Some(2)).unwrap();
        assert_eq!(&p.data()[4..], frozen.as_slice());
        assert_eq!(adam.state_scalars(), 8);
        assert!(adam.step("b", &mut p, &g, Some(3)).is_err());
        adam.step("b", &mut p, &g, Some(0)).unwrap();
        assert_eq!(adam.state_scalars(), 0);
    }

    #[test]
    fn non_finite_gradient_is_numerical_error() {
        let mut adam = Adam::new(AdamConfig::new(0.01), Precision::F64);
        let mut p = Tensor::zeros(&[1, 1]);
        let g = Tensor::scalar(f64::NAN).reshape(vec![1, 1]).unwrap();
        assert!(matches!(adam.step("p", &mut p, &g, None), Err(Error::Numerical(_))));
    }
}
