//! Adapted linear layers.
//!
//! A low-dimensional adapter computes `Y = X·W_res + α·((X·A)·S)·B` where
//! `W_res` and `A` are frozen, the square `S` is always trainable and the
//! leading `trainable_rows` rows of `B` may still be trained. Because `A` is
//! frozen, the only adapter-path activations backward needs are `X·A` and,
//! while rows of `B` are live, `(X·A)·S`; both are `tokens × r`.
//!
//! [`LoraState`] is the plain low-rank baseline `Y = X·W + α·(X·A)·B`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::spectral::{split_spectrum, split_spectrum_tail, svd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `A`, `B` from the leading singular triplets; `S = I`.
    #[default]
    SpectralTop,
    /// `A`, `B` from the trailing singular triplets; `S = I`.
    SpectralTail,
    /// Kaiming-normal `A` and `B`, `W_res = W`, `S = 0`.
    KaimingRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only `S` is ever trained.
    LdaOnly,
    /// `B` starts fully trainable and freezes row by row.
    #[default]
    GradualPmb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub init_mode: InitMode,
    pub freeze_mode: FreezeMode,
    pub d_in: usize,
    pub d_out: usize,
}

impl AdapterConfig {
    pub fn new(rank: usize, d_in: usize, d_out: usize) -> Self {
        AdapterConfig {
            rank,
            alpha: 1.0,
            init_mode: InitMode::SpectralTop,
            freeze_mode: FreezeMode::GradualPmb,
            d_in,
            d_out,
        }
    }

    pub fn with_init(mut self, init_mode: InitMode) -> Self {
        self.init_mode = init_mode;
        self
    }

    pub fn with_freeze(mut self, freeze_mode: FreezeMode) -> Self {
        self.freeze_mode = freeze_mode;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.d_in.min(self.d_out);
        if self.rank == 0 || self.rank > k {
            return Err(Error::config(format!(
                "adapter rank {} out of range 1..={k} for a {}x{} weight",
                self.rank, self.d_in, self.d_out
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("adapter alpha must be finite"));
        }
        Ok(())
    }
}

/// A parameter of an adapter that an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterParam {
    S,
    BRow(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    w_res: Tensor,
    a: Tensor,
    pub s: Tensor,
    pub b: Tensor,
    trainable_rows: usize,
    config: AdapterConfig,
}

/// Leaves of one adapter bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_res: Var,
    pub a: Var,
    pub s: Var,
    pub b: Var,
}

/// Builds an adapter around the pre-trained weight `w`.
pub fn build_adapter(w: &Tensor, cfg: &AdapterConfig, seed: u64) -> Result<AdapterState> {
    if !w.is_matrix() || w.shape() != [cfg.d_in, cfg.d_out] {
        return Err(Error::shape("build_adapter", w.shape(), &[cfg.d_in, cfg.d_out]));
    }
    cfg.validate()?;
    w.ensure_finite("pre-trained weight")?;
    let r = cfg.rank;
    let (w_res, a, b, s) = match cfg.init_mode {
        InitMode::SpectralTop | InitMode::SpectralTail => {
            let dec = svd(w)?;
            let split = if cfg.init_mode == InitMode::SpectralTop {
                split_spectrum(&dec, w, r)?
            } else {
                split_spectrum_tail(&dec, w, r)?
            };
            (split.w_res, split.a, split.b, Tensor::eye(r))
        }
        InitMode::KaimingRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::kaiming_normal(cfg.d_in, r, &mut rng);
            let b = Tensor::kaiming_normal(r, cfg.d_out, &mut rng);
            (w.clone(), a, b, Tensor::zeros(&[r, r]))
        }
    };
    let trainable_rows = match cfg.freeze_mode {
        FreezeMode::GradualPmb => r,
        FreezeMode::LdaOnly => 0,
    };
    Ok(AdapterState {
        w_res,
        a,
        s,
        b,
        trainable_rows,
        config: cfg.clone(),
    })
}

impl AdapterState {
    /// Reassembles a state from stored tensors (checkpoint load).
    pub fn from_parts(
        w_res: Tensor,
        a: Tensor,
        s: Tensor,
        b: Tensor,
        trainable_rows: usize,
        config: AdapterConfig,
    ) -> Result<Self> {
        let r = config.rank;
        let (di, dout) = (config.d_in, config.d_out);
        if w_res.shape() != [di, dout]
            || a.shape() != [di, r]
            || s.shape() != [r, r]
            || b.shape() != [r, dout]
        {
            return Err(Error::Format(format!(
                "adapter tensors do not match rank {r} and shape {di}x{dout}"
            )));
        }
        if trainable_rows > r {
            return Err(Error::Format(format!(
                "trainable rows {trainable_rows} exceed rank {r}"
            )));
        }
        Ok(AdapterState {
            w_res,
            a,
            s,
            b,
            trainable_rows,
            config,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn w_res(&self) -> &Tensor {
        &self.w_res
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn trainable_rows(&self) -> usize {
        self.trainable_rows
    }

    /// Freezes rows of `B` down to `rows`. Rows never unfreeze.
    pub fn set_trainable_rows(&mut self, rows: usize) -> Result<()> {
        if rows > self.trainable_rows {
            return Err(Error::Contract(format!(
                "cannot unfreeze B rows ({} -> {rows})",
                self.trainable_rows
            )));
        }
        self.trainable_rows = rows;
        Ok(())
    }

    pub fn trainable_parameter_names(&self) -> BTreeSet<AdapterParam> {
        std::iter::once(AdapterParam::S)
            .chain((0..self.trainable_rows).map(AdapterParam::BRow))
            .collect()
    }

    /// Scalars an optimizer currently updates.
    pub fn live_trainable_params(&self) -> usize {
        let r = self.rank();
        r * r + self.trainable_rows * self.config.d_out
    }

    /// `W_res + α·A·S·B`, the dense weight the adapter currently represents.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let asb = self.a.matmul(&self.s)?.matmul(&self.b)?;
        self.w_res.add(&asb.scale(self.config.alpha))
    }

    pub fn bind(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            w_res: g.constant(self.w_res.clone()),
            a: g.constant(self.a.clone()),
            s: g.leaf(self.s.clone(), true),
            b: g.leaf(self.b.clone(), self.trainable_rows > 0),
        }
    }

    /// Binds the adapter and applies it to `x`, tagging the adapter path
    /// with `scope` for activation accounting.
    pub fn forward(&self, g: &mut Graph, x: Var, scope: &str) -> Result<(Var, AdapterVars)> {
        let vars = self.bind(g);
        let y = adapter_forward(g, &vars, self.config.alpha, x, Some(scope))?;
        Ok((y, vars))
    }

    /// Zeroes gradient rows of `B` that are frozen.
    pub fn mask_b_gradient(&self, grad: &mut Tensor) {
        let n = grad.cols();
        grad.data_mut()[self.trainable_rows * n..].fill(0.0);
    }
}

/// `x·W_res + α·((x·A)·S)·B`, evaluated in that association order.
pub fn adapter_forward(
    g: &mut Graph,
    vars: &AdapterVars,
    alpha: f64,
    x: Var,
    scope: Option<&str>,
) -> Result<Var> {
    let main = g.matmul(x, vars.w_res)?;
    g.set_scope(scope);
    let path = (|| {
        let xa = g.matmul(x, vars.a)?;
        let xas = g.matmul(xa, vars.s)?;
        let xasb = g.matmul(xas, vars.b)?;
        if alpha == 1.0 {
            Ok(xasb)
        } else {
            g.scale(xasb, alpha)
        }
    })();
    g.set_scope(None);
    g.add(main, path?)
}

/// Low-rank baseline with trainable `A` (Kaiming-normal) and `B` (zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    w: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub w: Var,
    pub a: Var,
    pub b: Var,
}

impl LoraState {
    pub fn new(w: &Tensor, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if !w.is_matrix() {
            return Err(Error::shape("lora", w.shape(), &[]));
        }
        let (d_in, d_out) = (w.rows(), w.cols());
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "lora rank {rank} out of range for a {d_in}x{d_out} weight"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LoraState {
            w: w.clone(),
            a: Tensor::kaiming_normal(d_in, rank, &mut rng),
            b: Tensor::zeros(&[rank, d_out]),
            alpha,
        })
    }

    pub fn from_parts(w: Tensor, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != b.rows() {
            return Err(Error::Format("lora tensors have inconsistent shapes".into()));
        }
        Ok(LoraState { w, a, b, alpha })
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn live_trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn bind(&self, g: &mut Graph) -> LoraVars {
        LoraVars {
            w: g.constant(self.w.clone()),
            a: g.leaf(self.a.clone(), true),
            b: g.leaf(self.b.clone(), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, scope: &str) -> Result<(Var, LoraVars)> {
        let vars = self.bind(g);
        let y = lora_forward(g, &vars, self.alpha, x, Some(scope))?;
        Ok((y, vars))
    }
}

pub fn lora_forward(
    g: &mut Graph,
    vars: &LoraVars,
    alpha: f64,
    x: Var,
    scope: Option<&str>,
) -> Result<Var> {
    let main = g.matmul(x, vars.w)?;
    g.set_scope(scope);
    let path = (|| {
        let xa = g.matmul(x, vars.a)?;
        let xab = g.matmul(xa, vars.b)?;
        if alpha == 1.0 {
            Ok(xab)
        } else {
            g.scale(xab, alpha)
        }
    })();
    g.set_scope(None);
    g.add(main, path?)
}
