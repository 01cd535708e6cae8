//! Fine-tuning runs on the toy transformer.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{Method, RankAssignment};
use crate::adapter::{build_adapter, AdapterConfig, AdapterState, FreezeMode, InitMode, LoraState};
use crate::allocator::{allocate, score_modules, ModuleId, ModuleKind, RankBudget, RankPlan};
use crate::container::{Container, DType};
use crate::error::{Error, Result};
use crate::freezing::{FreezeSchedule, ScheduleRule};
use crate::graph::Graph;
use crate::model::{Projection, ToyConfig, ToyModel};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::task::{Batch, Task, TaskKind};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub method: Method,
    /// Uniform rank for `lora` and `lamda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Candidate ranks for `lamda++`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<RankBudget>,
    #[serde(default)]
    pub reverse_allocation: bool,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub freeze: FreezeMode,
    /// Fraction of the run over which rows of `B` freeze.
    #[serde(default = "default_ti")]
    pub ti_fraction: f64,
    #[serde(default)]
    pub schedule_rule: ScheduleRule,
    pub steps: usize,
    pub adam: AdamConfig,
    pub batch: usize,
    pub seed: u64,
    pub task: TaskKind,
    /// Prompt length of synthetic tasks; defaults to half the context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<usize>,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<ModuleKind>,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn one() -> f64 {
    1.0
}

fn default_ti() -> f64 {
    0.3
}

fn all_kinds() -> Vec<ModuleKind> {
    ModuleKind::ALL.to_vec()
}

fn default_eval_batches() -> usize {
    4
}

impl TrainRunConfig {
    pub fn new(method: Method, task: TaskKind, steps: usize, learning_rate: f64) -> Self {
        TrainRunConfig {
            method,
            rank: None,
            budget: None,
            reverse_allocation: false,
            alpha: 1.0,
            init: InitMode::default(),
            freeze: FreezeMode::default(),
            ti_fraction: default_ti(),
            schedule_rule: ScheduleRule::default(),
            steps,
            adam: AdamConfig::new(learning_rate),
            batch: 4,
            seed: 0,
            task,
            span: None,
            kinds: all_kinds(),
            eval_batches: default_eval_batches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.kinds.is_empty() && self.method != Method::Full {
            return Err(Error::config("no module kinds selected for adaptation"));
        }
        if !(0.0..=1.0).contains(&self.ti_fraction) {
            return Err(Error::config(format!("ti_fraction {} outside [0, 1]", self.ti_fraction)));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("learning rate and alpha must be finite and non-negative"));
        }
        match self.method {
            Method::Full => {}
            Method::Lora | Method::Lamda => match self.rank {
                Some(r) if r > 0 => {}
                _ => return Err(Error::config(format!("method {} needs a positive rank", self.method))),
            },
            Method::LamdaPlusPlus => match &self.budget {
                Some(b) => b.validate()?,
                None => return Err(Error::config("method lamda++ needs a rank budget")),
            },
        }
        if self.method == Method::LamdaPlusPlus && self.rank.is_some() {
            return Err(Error::config("lamda++ takes a budget, not a rank"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// Effective freezing horizon fraction: zero when only `S` trains.
    pub fn effective_ti(&self) -> f64 {
        match self.freeze {
            FreezeMode::LdaOnly => 0.0,
            FreezeMode::GradualPmb => self.ti_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub live_params: usize,
    pub stored_activation_floats: usize,
}

pub fn write_metrics_csv<W: Write>(metrics: &[StepMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: [u8; 32],
    pub model: ToyModel,
    pub optimizer: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub plan: Option<RankPlan>,
    pub checkpoint: Checkpoint,
}

/// Replaces adapted modules of a dense backbone according to `cfg`.
pub fn prepare_model(backbone: &ToyModel, cfg: &TrainRunConfig) -> Result<(ToyModel, Option<RankPlan>)> {
    cfg.validate()?;
    let mut model = backbone.clone();
    if cfg.method == Method::Full {
        model.train_backbone = true;
        return Ok((model, None));
    }
    model.train_backbone = false;
    let mut adapted: Vec<(ModuleId, Tensor)> = Vec::new();
    for id in model.module_ids() {
        if cfg.kinds.contains(&id.kind) {
            match &model.linear(id).proj {
                Projection::Dense(w) => adapted.push((id, w.clone())),
                _ => return Err(Error::config(format!("{id} is already adapted"))),
            }
        }
    }
    let plan = match (&cfg.method, &cfg.budget) {
        (Method::LamdaPlusPlus, Some(budget)) => {
            let scores = score_modules(&adapted, budget)?;
            Some(allocate(&scores, budget, cfg.reverse_allocation)?)
        }
        _ => None,
    };
    for (i, (id, w)) in adapted.iter().enumerate() {
        let rank = match &plan {
            Some(p) => p.rank_of(*id).expect("plan covers adapted modules"),
            None => cfg.rank.expect("validated"),
        };
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let proj = match cfg.method {
            Method::Lora => Projection::Lora(LoraState::new(w, rank, cfg.alpha, seed)?),
            _ => {
                let acfg = AdapterConfig::new(rank, w.rows(), w.cols())
                    .with_init(cfg.init)
                    .with_freeze(cfg.freeze)
                    .with_alpha(cfg.alpha);
                Projection::Lamda(build_adapter(w, &acfg, seed)?)
            }
        };
        model.linear_mut(*id).proj = proj;
    }
    Ok((model, plan))
}

/// Per-module adapter ranks of a prepared model.
pub fn rank_assignment(model: &ToyModel) -> RankAssignment {
    RankAssignment::PerModule(
        model
            .module_ids()
            .into_iter()
            .filter_map(|id| match &model.linear(id).proj {
                Projection::Lamda(s) => Some((id, s.rank())),
                Projection::Lora(s) => Some((id, s.rank())),
                Projection::Dense(_) => None,
            })
            .collect(),
    )
}

pub fn build_task(model: &ToyConfig, cfg: &TrainRunConfig) -> Result<Task> {
    Task::synthetic(cfg.task, model.vocab, model.context, cfg.span)
}

/// Mean loss over fixed batches.
pub fn eval_loss(model: &ToyModel, batches: &[Batch], precision: Precision) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new(precision);
        let f = model.forward(&mut g, &b.ids, b.batch)?;
        let loss = g.cross_entropy(f.logits, &b.targets)?;
        total += g.value(loss).data()[0];
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Runs `cfg` starting from the dense `backbone`.
pub fn train(backbone: &ToyModel, cfg: &TrainRunConfig, precision: Precision) -> Result<TrainOutcome> {
    let task = build_task(&backbone.config, cfg)?;
    train_on(backbone, cfg, &task, precision)
}

pub fn train_on(backbone: &ToyModel, cfg: &TrainRunConfig, task: &Task, precision: Precision) -> Result<TrainOutcome> {
    train_observed(backbone, cfg, task, precision, |_, _| {})
}

/// Like [`train_on`], calling `observe(step, model)` after every update.
pub fn train_observed(
    backbone: &ToyModel,
    cfg: &TrainRunConfig,
    task: &Task,
    precision: Precision,
    mut observe: impl FnMut(usize, &ToyModel),
) -> Result<TrainOutcome> {
    let (mut model, plan) = prepare_model(backbone, cfg)?;
    let eval = task.eval_set(cfg.seed, cfg.eval_batches, cfg.batch);
    let initial_eval_loss = eval_loss(&model, &eval, precision)?;

    let schedules: Vec<(ModuleId, FreezeSchedule)> = model
        .module_ids()
        .into_iter()
        .filter_map(|id| match &model.linear(id).proj {
            Projection::Lamda(s) if s.config().freeze_mode == FreezeMode::GradualPmb => Some((id, s.rank())),
            _ => None,
        })
        .map(|(id, r)| {
            let horizon = (cfg.ti_fraction * cfg.steps as f64).round() as usize;
            Ok((id, FreezeSchedule::with_rule(r, horizon, cfg.steps, cfg.schedule_rule)?))
        })
        .collect::<Result<_>>()?;
    let scopes = model.adapter_scopes();

    let mut adam = Adam::new(cfg.adam, precision);
    let mut stream = task.stream(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        for (id, sched) in &schedules {
            let rows = sched.trainable_rows(step)?;
            if let Projection::Lamda(s) = &mut model.linear_mut(*id).proj {
                if rows < s.trainable_rows() {
                    s.set_trainable_rows(rows)?;
                    if rows == 0 {
                        adam.forget(&format!("{}.b", id.prefix()));
                    }
                }
            }
        }
        let batch = stream.next_batch(cfg.batch);
        let mut g = Graph::new(precision);
        let fwd = model.forward(&mut g, &batch.ids, batch.batch)?;
        let loss = g.cross_entropy(fwd.logits, &batch.targets)?;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss_value} at step {step}")));
        }
        metrics.push(StepMetrics {
            step,
            loss: loss_value,
            live_params: model.live_trainable_params(),
            stored_activation_floats: scopes.iter().map(|s| g.retained_floats(s)).sum(),
        });
        let grads = g.backward(loss)?;
        for p in &fwd.params {
            let grad = grads
                .get(p.var)
                .ok_or_else(|| Error::Contract(format!("no gradient for {}", p.name)))?;
            let param = model
                .param_mut(&p.name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {}", p.name)))?;
            adam.step(&p.name, param, grad, p.live_rows)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("{msg} at step {step}")),
                    other => other,
                })?;
        }
        observe(step, &model);
    }
    let final_eval_loss = eval_loss(&model, &eval, precision)?;
    let checkpoint = Checkpoint {
        step: cfg.steps,
        config_hash: cfg.hash(),
        model,
        optimizer: adam.state().clone(),
    };
    Ok(TrainOutcome {
        metrics,
        initial_eval_loss,
        final_eval_loss,
        plan,
        checkpoint,
    })
}

/// Trains a randomly initialised dense model on `task` and returns it as
/// a frozen backbone.
pub fn pretrain(config: ToyConfig, task: TaskKind, steps: usize, learning_rate: f64, batch: usize, seed: u64, precision: Precision) -> Result<ToyModel> {
    let init = ToyModel::init(config, seed)?;
    let mut cfg = TrainRunConfig::new(Method::Full, task, steps, learning_rate);
    cfg.batch = batch;
    cfg.seed = seed;
    let mut model = train(&init, &cfg, precision)?.checkpoint.model;
    model.train_backbone = false;
    Ok(model)
}

fn scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v])
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let cfg = &self.model.config;
        let toy = [
            cfg.layers,
            cfg.d_model,
            cfg.heads,
            cfg.ffn_dim,
            cfg.vocab,
            cfg.context,
            cfg.causal as usize,
            self.model.train_backbone as usize,
        ];
        c.push_tensor("meta.toy", &Tensor::vector(toy.iter().map(|&v| v as f64).collect()), DType::F64)?;
        c.push_tensor("meta.step", &scalar(self.step as f64), DType::F64)?;
        let hash: Vec<f64> = self
            .config_hash
            .chunks(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        c.push_tensor("meta.config_hash", &Tensor::vector(hash), DType::F64)?;
        for (name, t) in self.model.named_tensors() {
            c.push_tensor(&name, t, DType::F64)?;
        }
        for id in self.model.module_ids() {
            if let Projection::Lamda(s) = &self.model.linear(id).proj {
                let p = id.prefix();
                c.push_tensor(&format!("meta.{p}.trainable_rows"), &scalar(s.trainable_rows() as f64), DType::F64)?;
                c.push_tensor(&format!("meta.{p}.alpha"), &scalar(s.config().alpha), DType::F64)?;
                let modes = [s.config().init_mode as usize as f64, s.config().freeze_mode as usize as f64];
                c.push_tensor(&format!("meta.{p}.modes"), &Tensor::vector(modes.to_vec()), DType::F64)?;
            }
            if let Projection::Lora(s) = &self.model.linear(id).proj {
                c.push_tensor(&format!("meta.{}.alpha", id.prefix()), &scalar(s.alpha), DType::F64)?;
            }
        }
        for (name, m) in &self.optimizer {
            c.push_tensor(&format!("adam.{name}.steps"), &scalar(m.steps as f64), DType::F64)?;
            if !m.m.is_empty() {
                c.push_tensor(&format!("adam.{name}.m"), &Tensor::vector(m.m.clone()), DType::F64)?;
                c.push_tensor(&format!("adam.{name}.v"), &Tensor::vector(m.v.clone()), DType::F64)?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Checkpoint> {
        let count = |name: &str| -> Result<usize> {
            let v = c.tensor(name)?.data()[0];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("{name} is not a count")));
            }
            Ok(v as usize)
        };
        let toy = c.tensor("meta.toy")?;
        let t: Vec<usize> = toy.data().iter().map(|&v| v as usize).collect();
        if t.len() != 8 {
            return Err(Error::Format("meta.toy must hold 8 values".into()));
        }
        let config = ToyConfig {
            layers: t[0],
            d_model: t[1],
            heads: t[2],
            ffn_dim: t[3],
            vocab: t[4],
            context: t[5],
            causal: t[6] != 0,
        };
        let mut model = ToyModel::init(config, 0)?;
        model.train_backbone = t[7] != 0;
        for id in model.module_ids() {
            let p = id.prefix();
            let proj = if c.get(&format!("{p}.w_res")).is_some() {
                let s = c.tensor(&format!("{p}.s"))?;
                let w_res = c.tensor(&format!("{p}.w_res"))?;
                let modes = c.tensor(&format!("meta.{p}.modes"))?;
                let init = match modes.data().first().copied().unwrap_or(-1.0) as i64 {
                    0 => InitMode::SpectralTop,
                    1 => InitMode::SpectralTail,
                    2 => InitMode::KaimingRandom,
                    m => return Err(Error::Format(format!("{p}: unknown init mode {m}"))),
                };
                let freeze = match modes.data().get(1).copied().unwrap_or(-1.0) as i64 {
                    0 => FreezeMode::LdaOnly,
                    1 => FreezeMode::GradualPmb,
                    m => return Err(Error::Format(format!("{p}: unknown freeze mode {m}"))),
                };
                let acfg = AdapterConfig::new(s.rows(), w_res.rows(), w_res.cols())
                    .with_init(init)
                    .with_freeze(freeze)
                    .with_alpha(c.tensor(&format!("meta.{p}.alpha"))?.data()[0]);
                Projection::Lamda(AdapterState::from_parts(
                    w_res,
                    c.tensor(&format!("{p}.a"))?,
                    s,
                    c.tensor(&format!("{p}.b"))?,
                    count(&format!("meta.{p}.trainable_rows"))?,
                    acfg,
                )?)
            } else if c.get(&format!("{p}.a")).is_some() {
                Projection::Lora(LoraState::from_parts(
                    c.tensor(&format!("{p}.weight"))?,
                    c.tensor(&format!("{p}.a"))?,
                    c.tensor(&format!("{p}.b"))?,
                    c.tensor(&format!("meta.{p}.alpha"))?.data()[0],
                )?)
            } else {
                Projection::Dense(c.tensor(&format!("{p}.weight"))?)
            };
            model.linear_mut(id).proj = proj;
        }
        let names: Vec<String> = model
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.ends_with(".w_res") && !(n.ends_with(".a") || n.ends_with(".weight") || n.ends_with(".s") || n.ends_with(".b")))
            .collect();
        for name in names {
            let t = c.tensor(&name)?;
            let slot = model
                .param_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::shape("checkpoint", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        let mut optimizer = BTreeMap::new();
        for name in c.names() {
            if let Some(param) = name.strip_prefix("adam.").and_then(|n| n.strip_suffix(".steps")) {
                let (m, v) = match c.get(&format!("adam.{param}.m")) {
                    Some(_) => (
                        c.tensor(&format!("adam.{param}.m"))?.into_data(),
                        c.tensor(&format!("adam.{param}.v"))?.into_data(),
                    ),
                    None => (Vec::new(), Vec::new()),
                };
                optimizer.insert(
                    param.to_string(),
                    Moments {
                        m,
                        v,
                        steps: count(name)? as u64,
                    },
                );
            }
        }
        let hash = c.tensor("meta.config_hash")?;
        if hash.len() != 16 {
            return Err(Error::Format("meta.config_hash must hold 16 values".into()));
        }
        let mut config_hash = [0u8; 32];
        for (i, &v) in hash.data().iter().enumerate() {
            let b = (v as u16).to_le_bytes();
            config_hash[2 * i] = b[0];
            config_hash[2 * i + 1] = b[1];
        }
        Ok(Checkpoint {
            step: count("meta.step")?,
            config_hash,
            model,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyConfig {
        ToyConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 12,
            context: 7,
            causal: true,
        }
    }

    #[test]
    fn full_training_reduces_loss() {
        let m = ToyModel::init(tiny(), 0).unwrap();
        let mut cfg = TrainRunConfig::new(Method::Full, TaskKind::Copy, 150, 1e-2);
        cfg.batch = 8;
        let out = train(&m, &cfg, Precision::F64).unwrap();
        assert!(out.final_eval_loss < out.initial_eval_loss);
        assert_eq!(out.metrics.len(), 150);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainRunConfig::new(Method::Lamda, TaskKind::Copy, 10, 1e-3);
        assert!(cfg.validate().is_err());
        cfg.rank = Some(2);
        cfg.validate().unwrap();
        cfg.method = Method::LamdaPlusPlus;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::init(tiny(), 1).unwrap();
        let mut cfg = TrainRunConfig::new(Method::Lamda, TaskKind::Reverse, 6, 1e-2);
        cfg.rank = Some(2);
        let ck = train(&m, &cfg, Precision::F32).unwrap().checkpoint;
        let c = ck.to_container().unwrap();
        let back = Checkpoint::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(back.to_container().unwrap().bits_eq(&c));
    }
}
