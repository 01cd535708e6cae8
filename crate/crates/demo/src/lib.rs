//! Browser bindings: freezing schedule, rank allocation and the cost model.
//!
//! Each operation has a plain Rust function returning JSON (tested
//! natively) and a `#[wasm_bindgen]` wrapper that turns errors into
//! JavaScript exceptions.

use lamda_core::accounting::{count_full, count_lamda_effective, count_lora, Method, ModelSpec, RankAssignment};
use lamda_core::allocator::{allocate, score_modules, ModuleId, ModuleKind, RankBudget};
use lamda_core::freezing::{FreezeSchedule, ScheduleRule};
use lamda_core::spectral::{normalized_energy, svd};
use lamda_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn json<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ScheduleView {
    rows: Vec<usize>,
    mean_rows: f64,
    /// Time-averaged trainable scalars of one module.
    trace_average: f64,
    /// `t_i/T · r·d_out/2 + r²`.
    effective: f64,
}

pub fn schedule_json(rank: usize, d_out: usize, ti_fraction: f64, total_iters: usize, rule: &str) -> Out {
    let rule: ScheduleRule = serde_json::from_value(serde_json::Value::String(rule.into())).map_err(|e| e.to_string())?;
    let horizon = FreezeSchedule::from_fraction(rank, ti_fraction, total_iters).map_err(|e| e.to_string())?.horizon;
    let sched = FreezeSchedule::with_rule(rank, horizon, total_iters, rule).map_err(|e| e.to_string())?;
    let rows = (0..total_iters).map(|t| sched.trainable_rows(t)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let mean_rows = sched.mean_trainable_rows();
    json(&ScheduleView {
        rows,
        mean_rows,
        trace_average: (rank * rank) as f64 + mean_rows * d_out as f64,
        effective: ti_fraction * (rank * d_out) as f64 / 2.0 + (rank * rank) as f64,
    })
}

#[derive(Serialize)]
struct ModuleView {
    module: String,
    /// Normalized energy captured by the top `k` components, k = 0..=n.
    energy: Vec<f64>,
    nu: f64,
    rank: usize,
}

#[derive(Serialize)]
struct AllocationView {
    modules: Vec<ModuleView>,
    mean_rank: f64,
}

/// Random `dim × dim` weights whose spectra decay at per-module rates up
/// to `max_decay`, scored and allocated under the given budget.
pub fn allocation_json(seed: u64, layers: usize, dim: usize, max_decay: f64, ranks: &[usize], target: usize, reverse: bool) -> Out {
    let budget = RankBudget::new(ranks.to_vec(), target).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<(ModuleId, Tensor)> = (0..layers)
        .flat_map(|l| ModuleKind::ALL.iter().map(move |&k| ModuleId::new(l, k)))
        .enumerate()
        .map(|(i, id)| {
            let decay = max_decay * ((i * 7919) % 101) as f64 / 100.0;
            let mut w = Tensor::kaiming_normal(dim, dim, &mut rng);
            for (j, v) in w.data_mut().iter_mut().enumerate() {
                *v *= (-decay * (j % dim) as f64).exp();
            }
            (id, w)
        })
        .collect();
    let scores = score_modules(&weights, &budget).map_err(|e| e.to_string())?;
    let plan = allocate(&scores, &budget, reverse).map_err(|e| e.to_string())?;
    let modules = weights
        .iter()
        .zip(&scores)
        .map(|((id, w), s)| {
            let sigma = svd(w).map_err(|e| e.to_string())?.sigma;
            let energy = (0..=sigma.len()).map(|k| normalized_energy(&sigma, k)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
            Ok(ModuleView {
                module: id.to_string(),
                energy,
                nu: s.nu,
                rank: plan.rank_of(*id).unwrap_or(0),
            })
        })
        .collect::<Result<_, String>>()?;
    json(&AllocationView {
        modules,
        mean_rank: plan.mean_rank,
    })
}

/// Cost report for a named preset, as the `count` command prints it.
pub fn count_json(preset: &str, method: &str, rank: usize, ti_fraction: f64) -> Out {
    let spec = ModelSpec::preset(preset).map_err(|e| e.to_string())?;
    let method: Method = method.parse().map_err(|e: lamda_core::Error| e.to_string())?;
    let report = match method {
        Method::Full => count_full(&spec),
        Method::Lora => count_lora(&spec, rank),
        Method::Lamda => count_lamda_effective(&spec, &RankAssignment::Uniform(rank), ti_fraction),
        Method::LamdaPlusPlus => return Err("lamda++ needs a rank plan; use the command-line tool".into()),
    }
    .map_err(|e| e.to_string())?;
    json(&report)
}

pub fn presets_json() -> Out {
    json(&ModelSpec::preset_names())
}

fn js(r: Out) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule(rank: usize, d_out: usize, ti_fraction: f64, total_iters: usize, rule: &str) -> Result<String, JsError> {
    js(schedule_json(rank, d_out, ti_fraction, total_iters, rule))
}

#[wasm_bindgen]
pub fn allocation(seed: u32, layers: usize, dim: usize, max_decay: f64, ranks: Vec<usize>, target: usize, reverse: bool) -> Result<String, JsError> {
    js(allocation_json(seed as u64, layers, dim, max_decay, &ranks, target, reverse))
}

#[wasm_bindgen]
pub fn count(preset: &str, method: &str, rank: usize, ti_fraction: f64) -> Result<String, JsError> {
    js(count_json(preset, method, rank, ti_fraction))
}

#[wasm_bindgen]
pub fn presets() -> Result<String, JsError> {
    js(presets_json())
}
