//! Analytical cost model for adapter fine-tuning.
//!
//! Counts trainable parameters, optimizer state, gradient memory and the
//! activations adapter paths force backward to retain, for full
//! fine-tuning, the low-rank baseline and low-dimensional adapters. All
//! figures are pure functions of a [`ModelSpec`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocator::{ModuleId, ModuleKind, RankPlan};
use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("llama2-7b", include_str!("../presets/llama2-7b.json")),
    ("deberta-v3-base", include_str!("../presets/deberta-v3-base.json")),
    (
        "deberta-v3-base-qkvff",
        include_str!("../presets/deberta-v3-base-qkvff.json"),
    ),
    ("bart-large", include_str!("../presets/bart-large.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// Module kinds that carry an adapter.
    pub kinds: Vec<ModuleKind>,
    pub seq_len: usize,
    pub batch: usize,
    pub bytes_per_scalar: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleShape {
    pub id: ModuleId,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModelSpec {
    pub fn preset(name: &str) -> Result<ModelSpec> {
        let (_, json) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model preset {name:?} (known: {})",
                    ModelSpec::preset_names().join(", ")
                ))
            })?;
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.d_model,
            self.ffn_dim,
            self.seq_len,
            self.batch,
            self.bytes_per_scalar,
        ];
        if dims.contains(&0) {
            return Err(Error::config(format!("model spec {} has a zero dimension", self.name)));
        }
        if self.kinds.is_empty() {
            return Err(Error::config(format!("model spec {} adapts no modules", self.name)));
        }
        Ok(())
    }

    pub fn with_kinds(mut self, kinds: &[ModuleKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    pub fn shape_of(&self, kind: ModuleKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.ffn_dim);
        match kind {
            ModuleKind::Q | ModuleKind::K | ModuleKind::V | ModuleKind::O => (d, d),
            ModuleKind::Ffn1 => (d, f),
            ModuleKind::Ffn2 => (f, d),
        }
    }

    /// Adapted modules, layer-major in kind order.
    pub fn modules(&self) -> Vec<ModuleShape> {
        let mut kinds = self.kinds.clone();
        kinds.sort();
        kinds.dedup();
        (0..self.layers)
            .flat_map(|layer| {
                kinds.iter().map(move |&kind| {
                    let (d_in, d_out) = self.shape_of(kind);
                    ModuleShape {
                        id: ModuleId::new(layer, kind),
                        d_in,
                        d_out,
                    }
                })
            })
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Lora,
    Lamda,
    #[serde(rename = "lamda++")]
    LamdaPlusPlus,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Method::Full),
            "lora" => Ok(Method::Lora),
            "lamda" => Ok(Method::Lamda),
            "lamda++" | "lamdapp" | "lamda-plus-plus" => Ok(Method::LamdaPlusPlus),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Lamda => "lamda",
            Method::LamdaPlusPlus => "lamda++",
        })
    }
}

/// Per-module adapter ranks.
#[derive(Debug, Clone, PartialEq)]
pub enum RankAssignment {
    Uniform(usize),
    PerModule(BTreeMap<ModuleId, usize>),
}

impl RankAssignment {
    pub fn from_plan(plan: &RankPlan) -> Self {
        RankAssignment::PerModule(plan.entries.iter().map(|e| (e.module, e.rank)).collect())
    }

    pub fn rank_of(&self, id: ModuleId) -> Result<usize> {
        match self {
            RankAssignment::Uniform(r) => Ok(*r),
            RankAssignment::PerModule(m) => m
                .get(&id)
                .copied()
                .ok_or_else(|| Error::config(format!("no rank assigned to {id}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub module: ModuleId,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    /// Trainable scalars at the start of fine-tuning.
    pub trainable_params: usize,
    /// Time-averaged trainable scalars.
    pub effective_params: f64,
    /// Activation scalars the adapter path retains per step: the input
    /// `X` for full/low-rank updates, `X·A` for the low-dimensional adapter.
    pub stored_activation_floats: usize,
    /// Secondary retained activation: `X·A` for the low-rank baseline,
    /// `X·A·S` while rows of `B` are trainable.
    pub stored_activation_floats_aux: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub method: Method,
    pub trainable_params: usize,
    pub effective_params: f64,
    pub optimizer_state_scalars: usize,
    pub optimizer_state_bytes: usize,
    pub gradient_bytes: usize,
    pub stored_activation_floats: usize,
    pub stored_activation_floats_aux: usize,
    pub stored_activation_bytes: usize,
    pub modules: Vec<ModuleCost>,
}

impl CostReport {
    fn from_modules(spec: &ModelSpec, method: Method, modules: Vec<ModuleCost>) -> Self {
        let trainable: usize = modules.iter().map(|m| m.trainable_params).sum();
        let stored: usize = modules.iter().map(|m| m.stored_activation_floats).sum();
        let aux: usize = modules.iter().map(|m| m.stored_activation_floats_aux).sum();
        let bytes = spec.bytes_per_scalar;
        CostReport {
            model: spec.name.clone(),
            method,
            trainable_params: trainable,
            effective_params: modules.iter().map(|m| m.effective_params).sum(),
            optimizer_state_scalars: optimizer_state_scalars(trainable),
            optimizer_state_bytes: optimizer_state_scalars(trainable) * bytes,
            gradient_bytes: trainable * bytes,
            stored_activation_floats: stored,
            stored_activation_floats_aux: aux,
            stored_activation_bytes: (stored + aux) * bytes,
            modules,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "module",
            "d_in",
            "d_out",
            "rank",
            "trainable_params",
            "effective_params",
            "stored_activation_floats",
            "stored_activation_floats_aux",
        ])?;
        for m in &self.modules {
            w.write_record([
                m.module.to_string(),
                m.d_in.to_string(),
                m.d_out.to_string(),
                m.rank.to_string(),
                m.trainable_params.to_string(),
                m.effective_params.to_string(),
                m.stored_activation_floats.to_string(),
                m.stored_activation_floats_aux.to_string(),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.trainable_params.to_string(),
            self.effective_params.to_string(),
            self.stored_activation_floats.to_string(),
            self.stored_activation_floats_aux.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Adam keeps two moment buffers per trainable scalar.
pub fn optimizer_state_scalars(trainable: usize) -> usize {
    2 * trainable
}

fn check_rank(m: &ModuleShape, r: usize) -> Result<()> {
    if r > m.d_in.min(m.d_out) {
        return Err(Error::config(format!(
            "{}: rank {r} exceeds min dimension of {}x{}",
            m.id, m.d_in, m.d_out
        )));
    }
    Ok(())
}

pub fn count_full(spec: &ModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let bn = spec.tokens();
    let modules = spec
        .modules()
        .into_iter()
        .map(|m| ModuleCost {
            module: m.id,
            d_in: m.d_in,
            d_out: m.d_out,
            rank: m.d_in.min(m.d_out),
            trainable_params: m.d_in * m.d_out,
            effective_params: (m.d_in * m.d_out) as f64,
            stored_activation_floats: bn * m.d_in,
            stored_activation_floats_aux: 0,
        })
        .collect();
    Ok(CostReport::from_modules(spec, Method::Full, modules))
}

/// Low-rank baseline: `(d_in + d_out)·r` trainable scalars per module.
pub fn count_lora(spec: &ModelSpec, r: usize) -> Result<CostReport> {
    spec.validate()?;
    let bn = spec.tokens();
    let modules = spec
        .modules()
        .into_iter()
        .map(|m| {
            check_rank(&m, r)?;
            let p = (m.d_in + m.d_out) * r;
            Ok(ModuleCost {
                module: m.id,
                d_in: m.d_in,
                d_out: m.d_out,
                rank: r,
                trainable_params: p,
                effective_params: p as f64,
                stored_activation_floats: if r > 0 { bn * m.d_in } else { 0 },
                stored_activation_floats_aux: bn * r,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_modules(spec, Method::Lora, modules))
}

/// Low-dimensional adapters with `B` trained for a fraction `ti_fraction`
/// of the run: per module `ti_fraction · r·d_out / 2 + r²` effective
/// scalars.
pub fn count_lamda_effective(
    spec: &ModelSpec,
    ranks: &RankAssignment,
    ti_fraction: f64,
) -> Result<CostReport> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&ti_fraction) {
        return Err(Error::config(format!("t_i fraction {ti_fraction} outside [0, 1]")));
    }
    let method = match ranks {
        RankAssignment::Uniform(_) => Method::Lamda,
        RankAssignment::PerModule(_) => Method::LamdaPlusPlus,
    };
    let bn = spec.tokens();
    let gradual = ti_fraction > 0.0;
    let modules = spec
        .modules()
        .into_iter()
        .map(|m| {
            let r = ranks.rank_of(m.id)?;
            check_rank(&m, r)?;
            let pmb = r * m.d_out;
            let lda = r * r;
            Ok(ModuleCost {
                module: m.id,
                d_in: m.d_in,
                d_out: m.d_out,
                rank: r,
                trainable_params: lda + if gradual { pmb } else { 0 },
                effective_params: ti_fraction * pmb as f64 / 2.0 + lda as f64,
                stored_activation_floats: bn * r,
                stored_activation_floats_aux: if gradual { bn * r } else { 0 },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // integer sums first, so the total carries a single rounding
    let pmb: usize = modules.iter().map(|m| m.rank * m.d_out).sum();
    let lda: usize = modules.iter().map(|m| m.rank * m.rank).sum();
    let mut report = CostReport::from_modules(spec, method, modules);
    report.effective_params = ti_fraction * pmb as f64 / 2.0 + lda as f64;
    Ok(report)
}

/// Retained adapter-path activation scalars per step, as
/// `(primary, secondary)`.
pub fn activation_footprint(spec: &ModelSpec, method: Method, r: usize) -> Result<(usize, usize)> {
    let report = match method {
        Method::Full => count_full(spec)?,
        Method::Lora => count_lora(spec, r)?,
        Method::Lamda | Method::LamdaPlusPlus => {
            count_lamda_effective(spec, &RankAssignment::Uniform(r), 0.0)?
        }
    };
    let aux = match method {
        Method::Lamda | Method::LamdaPlusPlus => spec.tokens() * r * spec.modules().len(),
        _ => report.stored_activation_floats_aux,
    };
    Ok((report.stored_activation_floats, aux))
}

/// Live trainable scalars at iteration `t` given each module's live `B`
/// rows.
pub fn live_lamda_params(spec: &ModelSpec, ranks: &RankAssignment, live_rows: impl Fn(ModuleId, usize) -> usize) -> Result<usize> {
    spec.modules()
        .into_iter()
        .map(|m| {
            let r = ranks.rank_of(m.id)?;
            Ok(r * r + live_rows(m.id, r) * m.d_out)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        for name in ModelSpec::preset_names() {
            ModelSpec::preset(name).unwrap();
        }
        assert!(ModelSpec::preset("gpt-5").is_err());
    }

    #[test]
    fn llama_lora_r16() {
        let spec = ModelSpec::preset("llama2-7b").unwrap();
        assert_eq!(count_lora(&spec, 16).unwrap().trainable_params, 28_049_408);
    }

    #[test]
    fn llama_effective_counts() {
        let spec = ModelSpec::preset("llama2-7b").unwrap();
        let r = RankAssignment::Uniform(32);
        let at = |f| count_lamda_effective(&spec, &r, f).unwrap().effective_params;
        assert!((at(0.3) - 4_371_251.2).abs() < 1e-6);
        assert!((at(0.2) - 2_968_780.8).abs() < 1e-6);
        assert!((at(0.1) - 1_566_310.4).abs() < 1e-6);
        assert_eq!(at(0.0), 163_840.0);
        let lda = count_lamda_effective(&spec, &r, 0.0).unwrap();
        assert_eq!(lda.optimizer_state_scalars, 2 * 163_840);
    }

    #[test]
    fn deberta_counts() {
        let spec = ModelSpec::preset("deberta-v3-base").unwrap();
        assert_eq!(count_lora(&spec, 8).unwrap().trainable_params, 1_327_104);
        let lda = count_lamda_effective(&spec, &RankAssignment::Uniform(32), 0.0).unwrap();
        assert_eq!(lda.trainable_params, 73_728);
        // headline LoRA-to-LDA reduction of about 17.7x, within 10%
        let ratio: f64 = 1_327_104.0 / 73_728.0;
        assert!((ratio / 17.7 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn zero_rank_lora() {
        let spec = ModelSpec::preset("llama2-7b").unwrap();
        let rep = count_lora(&spec, 0).unwrap();
        assert_eq!(rep.trainable_params, 0);
        assert_eq!(rep.optimizer_state_bytes, 0);
    }

    #[test]
    fn activation_ratio() {
        let spec = ModelSpec {
            name: "one".into(),
            layers: 1,
            d_model: 4096,
            ffn_dim: 4096,
            kinds: vec![ModuleKind::Q],
            seq_len: 1024,
            batch: 1,
            bytes_per_scalar: 2,
        };
        let (lora, _) = activation_footprint(&spec, Method::Lora, 32).unwrap();
        let (lamda, _) = activation_footprint(&spec, Method::Lamda, 32).unwrap();
        assert_eq!(lora, 4_194_304);
        assert_eq!(lamda, 32_768);
        assert_eq!(lora / lamda, 128);
        let (a, _) = activation_footprint(&spec, Method::Lora, 4096).unwrap();
        let (b, _) = activation_footprint(&spec, Method::Lamda, 4096).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn totals_are_module_sums() {
        let spec = ModelSpec::preset("bart-large").unwrap();
        let rep = count_lamda_effective(&spec, &RankAssignment::Uniform(16), 0.3).unwrap();
        let eff: f64 = rep.modules.iter().map(|m| m.effective_params).sum();
        assert!((rep.effective_params - eff).abs() < 1e-6 * eff);
        let t: usize = rep.modules.iter().map(|m| m.trainable_params).sum();
        assert_eq!(rep.trainable_params, t);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), rep.modules.len() + 2);
    }

    #[test]
    fn rank_too_large() {
        let spec = ModelSpec::preset("deberta-v3-base").unwrap();
        assert!(count_lora(&spec, 769).is_err());
    }
}
