//! Spectrum-driven rank allocation.
//!
//! Each adapted module gets a candidacy score
//! `nu = (E(r_S) − E(r_1)) / E(r_T)` from the singular values of its
//! pre-trained weight, where `E(r)` is the energy of the top `r` values.
//! Modules are sorted by ascending `nu` and the sorted list is cut into `S`
//! quantiles: the first receives the largest candidate rank, the last the
//! smallest.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{energy_score, svd};
use crate::tensor::Tensor;

/// Kinds of adapted linear modules, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::Q,
        ModuleKind::K,
        ModuleKind::V,
        ModuleKind::O,
        ModuleKind::Ffn1,
        ModuleKind::Ffn2,
    ];

    /// The five kinds adapted in the reference experiments (no output
    /// projection).
    pub const QKV_FFN: [ModuleKind; 5] = [
        ModuleKind::Q,
        ModuleKind::K,
        ModuleKind::V,
        ModuleKind::Ffn1,
        ModuleKind::Ffn2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Q => "q",
            ModuleKind::K => "k",
            ModuleKind::V => "v",
            ModuleKind::O => "o",
            ModuleKind::Ffn1 => "ffn1",
            ModuleKind::Ffn2 => "ffn2",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown module kind {s:?}")))
    }
}

/// A linear module, identified by layer and kind. Ordering is the
/// allocation tie-break: layer first, then kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        ModuleId { layer, kind }
    }

    /// Tensor-name prefix, e.g. `layers.3.ffn1`.
    pub fn prefix(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind)
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankBudget {
    /// Candidate ranks, strictly ascending.
    pub ranks: Vec<usize>,
    /// Required mean rank.
    pub target: usize,
}

impl RankBudget {
    pub fn new(ranks: Vec<usize>, target: usize) -> Result<Self> {
        let b = RankBudget { ranks, target };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::config("rank budget has no candidate ranks"));
        }
        if self.ranks[0] == 0 {
            return Err(Error::config("candidate ranks must be positive"));
        }
        if self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "candidate ranks {:?} are not strictly ascending",
                self.ranks
            )));
        }
        let sum: usize = self.ranks.iter().sum();
        if sum != self.target * self.ranks.len() {
            return Err(Error::config(format!(
                "candidate ranks {:?} average to {}, not the target {}",
                self.ranks,
                sum as f64 / self.ranks.len() as f64,
                self.target
            )));
        }
        Ok(())
    }

    pub fn smallest(&self) -> usize {
        self.ranks[0]
    }

    pub fn largest(&self) -> usize {
        *self.ranks.last().expect("validated budget")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub module: ModuleId,
    pub e_r1: f64,
    pub e_rs: f64,
    pub e_rt: f64,
    pub e_total: f64,
    pub nu: f64,
}

/// Candidacy score from a descending spectrum.
pub fn score_spectrum(module: ModuleId, sigma: &[f64], budget: &RankBudget) -> Result<ModuleScore> {
    budget.validate()?;
    if budget.largest() > sigma.len() || budget.target > sigma.len() {
        return Err(Error::config(format!(
            "{module}: candidate rank {} exceeds the module's {} singular values",
            budget.largest().max(budget.target),
            sigma.len()
        )));
    }
    let e_r1 = energy_score(sigma, budget.smallest())?;
    let e_rs = energy_score(sigma, budget.largest())?;
    let e_rt = energy_score(sigma, budget.target)?;
    let e_total = energy_score(sigma, sigma.len())?;
    if e_rt <= 0.0 {
        return Err(Error::config(format!("{module}: weight has no spectral energy")));
    }
    Ok(ModuleScore {
        module,
        e_r1,
        e_rs,
        e_rt,
        e_total,
        nu: (e_rs - e_r1) / e_rt,
    })
}

/// Scores every module from its pre-trained weight. With the `parallel`
/// feature decompositions run on the rayon pool; the result is ordered by
/// module id.
pub fn score_modules(weights: &[(ModuleId, Tensor)], budget: &RankBudget) -> Result<Vec<ModuleScore>> {
    budget.validate()?;
    for (id, w) in weights {
        let k = w.rows().min(w.cols());
        if !w.is_matrix() || budget.largest() > k {
            return Err(Error::config(format!(
                "{id}: candidate rank {} exceeds min dimension {k} of {:?}",
                budget.largest(),
                w.shape()
            )));
        }
    }
    #[cfg(feature = "parallel")]
    let items = weights.par_iter();
    #[cfg(not(feature = "parallel"))]
    let items = weights.iter();
    let mut scores = items
        .map(|(id, w)| {
            let dec = svd(w)?;
            score_spectrum(*id, &dec.sigma, budget)
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by_key(|s| s.module);
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub module: ModuleId,
    pub nu: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    /// Modules in allocation order (ascending `nu`, ties by module id).
    pub entries: Vec<PlanEntry>,
    pub mean_rank: f64,
    pub target_rank: usize,
    pub reversed: bool,
}

impl RankPlan {
    pub fn rank_of(&self, module: ModuleId) -> Option<usize> {
        self.entries.iter().find(|e| e.module == module).map(|e| e.rank)
    }

    pub fn order(&self) -> Vec<ModuleId> {
        self.entries.iter().map(|e| e.module).collect()
    }
}

/// Quantile `[floor(qL/S), floor((q+1)L/S))` of the sorted list.
pub fn quantile_bounds(q: usize, modules: usize, quantiles: usize) -> std::ops::Range<usize> {
    (q * modules / quantiles)..((q + 1) * modules / quantiles)
}

/// Assigns ranks by quantile of ascending `nu`. With `reverse`, the
/// smallest rank goes to the first quantile instead.
pub fn allocate(scores: &[ModuleScore], budget: &RankBudget, reverse: bool) -> Result<RankPlan> {
    budget.validate()?;
    if scores.is_empty() {
        return Err(Error::config("no modules to allocate ranks to"));
    }
    if let Some(s) = scores.iter().find(|s| !s.nu.is_finite()) {
        return Err(Error::Numerical(format!("{}: non-finite candidacy score", s.module)));
    }
    let mut sorted: Vec<&ModuleScore> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        a.nu.partial_cmp(&b.nu)
            .unwrap_or(Ordering::Equal)
            .then(a.module.cmp(&b.module))
    });
    let l = sorted.len();
    let s = budget.ranks.len();
    let mut entries = Vec::with_capacity(l);
    for q in 0..s {
        let rank = if reverse {
            budget.ranks[q]
        } else {
            budget.ranks[s - 1 - q]
        };
        for score in &sorted[quantile_bounds(q, l, s)] {
            entries.push(PlanEntry {
                module: score.module,
                nu: score.nu,
                rank,
            });
        }
    }
    let mean_rank = entries.iter().map(|e| e.rank as f64).sum::<f64>() / l as f64;
    Ok(RankPlan {
        entries,
        mean_rank,
        target_rank: budget.target,
        reversed: reverse,
    })
}
