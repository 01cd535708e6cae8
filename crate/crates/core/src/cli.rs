//! Command-line front end.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::accounting::{count_full, count_lamda_effective, count_lora, Method, ModelSpec, RankAssignment};
use crate::allocator::{allocate, score_spectrum, ModuleId, ModuleKind, ModuleScore, RankBudget, RankPlan};
use crate::config::RunConfigFile;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::spectral::{normalized_energy, svd};
use crate::tensor::Tensor;
use crate::train::{read_metrics_csv, train, write_metrics_csv, Checkpoint, StepMetrics};

#[derive(Debug, Parser)]
#[command(name = "lamda", version, about = "Spectral low-dimensional adapters: analysis, planning, accounting and toy fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spectra, normalized energy curves and candidacy scores of the
    /// `layers.N.KIND.weight` tensors in a container.
    Analyze {
        #[arg(long)]
        weights: PathBuf,
        /// Candidate ranks, ascending, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long)]
        target: usize,
        /// Kinds to analyze; with --layers, every listed tensor must exist.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<ModuleKind>>,
        #[arg(long)]
        layers: Option<usize>,
        /// Longest prefix of the normalized energy curve.
        #[arg(long, default_value_t = 32)]
        curve: usize,
        /// Directory for energy.csv, spectra.csv and scores.json; scores
        /// go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantile rank plan from module scores.
    Plan {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        budget: PathBuf,
        /// Give the largest ranks to the highest scores instead.
        #[arg(long)]
        reverse: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter, optimizer and activation accounting for a model preset.
    Count {
        #[arg(long)]
        model_preset: String,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        /// Fraction of training over which B freezes.
        #[arg(long, default_value_t = 0.0)]
        ti: f64,
        /// Rank plan for lamda++.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Override the preset's adapted kinds.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<ModuleKind>>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Fine-tune the toy transformer from a JSON run configuration.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics.csv files of several runs, aligned by step.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Tensors named `layers.N.KIND.weight`.
fn parse_weight_name(name: &str) -> Option<ModuleId> {
    let rest = name.strip_prefix("layers.")?.strip_suffix(".weight")?;
    let (l, k) = rest.split_once('.')?;
    Some(ModuleId::new(l.parse().ok()?, k.parse().ok()?))
}

pub struct ModuleAnalysis {
    pub module: ModuleId,
    pub sigma: Vec<f64>,
    pub score: ModuleScore,
}

pub fn analyze(container: &Container, budget: &RankBudget, kinds: Option<&[ModuleKind]>, layers: Option<usize>) -> Result<Vec<ModuleAnalysis>> {
    budget.validate()?;
    let ids: Vec<ModuleId> = match layers {
        Some(l) => {
            let kinds = kinds.unwrap_or(&ModuleKind::ALL);
            (0..l)
                .flat_map(|layer| kinds.iter().map(move |&k| ModuleId::new(layer, k)))
                .collect()
        }
        None => {
            let mut ids: Vec<ModuleId> = container
                .names()
                .filter_map(parse_weight_name)
                .filter(|id| kinds.is_none_or(|k| k.contains(&id.kind)))
                .collect();
            ids.sort();
            ids
        }
    };
    if ids.is_empty() {
        return Err(Error::config("no layers.N.KIND.weight tensors to analyze"));
    }
    let weights: Vec<(ModuleId, Tensor)> = ids
        .iter()
        .map(|&id| {
            let name = format!("{}.weight", id.prefix());
            let t = container
                .tensor(&name)
                .map_err(|_| Error::config(format!("module {id}: tensor {name:?} missing from weights")))?;
            if !t.is_matrix() {
                return Err(Error::config(format!("module {id}: tensor is not a matrix")));
            }
            Ok((id, t))
        })
        .collect::<Result<_>>()?;
    weights
        .par_iter()
        .map(|(id, w)| {
            let sigma = svd(w).map_err(|e| annotate(e, *id))?.sigma;
            let score = score_spectrum(*id, &sigma, budget)?;
            Ok(ModuleAnalysis { module: *id, sigma, score })
        })
        .collect()
}

fn annotate(e: Error, id: ModuleId) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{id}: {m}")),
        Error::Config(m) => Error::Config(format!("{id}: {m}")),
        other => other,
    }
}

pub fn energy_csv<W: Write>(analysis: &[ModuleAnalysis], curve: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["module", "rank", "normalized_energy"])?;
    for a in analysis {
        for r in 1..=curve.min(a.sigma.len()) {
            w.write_record([a.module.to_string(), r.to_string(), normalized_energy(&a.sigma, r)?.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn spectra_csv<W: Write>(analysis: &[ModuleAnalysis], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["module", "index", "sigma"])?;
    for a in analysis {
        for (i, s) in a.sigma.iter().enumerate() {
            w.write_record([a.module.to_string(), i.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    initial_eval_loss: f64,
    final_eval_loss: f64,
    steps: usize,
    precision: String,
    config_hash: String,
    plan: Option<&'a RankPlan>,
}

pub fn finetune(config: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = RunConfigFile::load(config)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
    let precision = cfg.effective_precision()?;
    std::fs::create_dir_all(&dir)?;
    let backbone = cfg.load_backbone(precision)?;
    let bb = Checkpoint {
        step: 0,
        config_hash: [0; 32],
        model: backbone.clone(),
        optimizer: BTreeMap::new(),
    };
    bb.to_container()?.save(&dir.join("backbone.ldwt"))?;
    let outcome = train(&backbone, &cfg.run, precision)?;
    write_metrics_csv(&outcome.metrics, std::fs::File::create(dir.join("metrics.csv"))?)?;
    outcome.checkpoint.to_container()?.save(&dir.join("checkpoint.ldwt"))?;
    let hash: String = outcome.checkpoint.config_hash.iter().map(|b| format!("{b:02x}")).collect();
    let summary = RunSummary {
        initial_eval_loss: outcome.initial_eval_loss,
        final_eval_loss: outcome.final_eval_loss,
        steps: cfg.run.steps,
        precision: precision.to_string(),
        config_hash: hash,
        plan: outcome.plan.as_ref(),
    };
    std::fs::write(dir.join("summary.json"), to_json(&summary)?)?;
    Ok(dir)
}

/// `metrics.csv` of every run under `dir` (the directory itself or its
/// immediate subdirectories), keyed by run name.
pub fn collect_runs(dir: &Path) -> Result<BTreeMap<String, Vec<StepMetrics>>> {
    let mut runs = BTreeMap::new();
    let mut candidates = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::config(format!("cannot read runs directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    candidates.extend(subdirs);
    for c in candidates {
        let f = c.join("metrics.csv");
        if f.is_file() {
            let name = c.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            runs.insert(name, read_metrics_csv(std::fs::File::open(f)?)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::config(format!("no metrics.csv under {}", dir.display())));
    }
    Ok(runs)
}

pub fn report_csv<W: Write>(runs: &BTreeMap<String, Vec<StepMetrics>>, out: W) -> Result<()> {
    let mut by_step: BTreeMap<usize, BTreeMap<&str, &StepMetrics>> = BTreeMap::new();
    for (name, ms) in runs {
        for m in ms {
            by_step.entry(m.step).or_default().insert(name, m);
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    for name in runs.keys() {
        for col in ["loss", "live_params", "stored_activation_floats"] {
            header.push(format!("{name}.{col}"));
        }
    }
    w.write_record(&header)?;
    for (step, row) in by_step {
        let mut rec = vec![step.to_string()];
        for name in runs.keys() {
            match row.get(name.as_str()) {
                Some(m) => {
                    rec.push(m.loss.to_string());
                    rec.push(m.live_params.to_string());
                    rec.push(m.stored_activation_floats.to_string());
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze {
            weights,
            ranks,
            target,
            kinds,
            layers,
            curve,
            out,
        } => {
            let budget = RankBudget::new(ranks, target)?;
            let container = Container::load(&weights)?;
            let analysis = analyze(&container, &budget, kinds.as_deref(), layers)?;
            let scores: Vec<&ModuleScore> = analysis.iter().map(|a| &a.score).collect();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    energy_csv(&analysis, curve, std::fs::File::create(dir.join("energy.csv"))?)?;
                    spectra_csv(&analysis, std::fs::File::create(dir.join("spectra.csv"))?)?;
                    std::fs::write(dir.join("scores.json"), to_json(&scores)?)?;
                }
                None => emit(None, &to_json(&scores)?)?,
            }
        }
        Command::Plan {
            scores,
            budget,
            reverse,
            out,
        } => {
            let scores: Vec<ModuleScore> = read_json(&scores)?;
            let budget: RankBudget = read_json(&budget)?;
            let plan = allocate(&scores, &budget, reverse)?;
            emit(out.as_deref(), &to_json(&plan)?)?;
        }
        Command::Count {
            model_preset,
            method,
            rank,
            ti,
            plan,
            kinds,
            format,
        } => {
            let mut spec = ModelSpec::preset(&model_preset)?;
            if let Some(k) = kinds {
                spec = spec.with_kinds(&k);
            }
            let report = match method {
                Method::Full => count_full(&spec)?,
                Method::Lora => count_lora(&spec, rank)?,
                Method::Lamda => count_lamda_effective(&spec, &RankAssignment::Uniform(rank), ti)?,
                Method::LamdaPlusPlus => {
                    let path = plan.ok_or_else(|| Error::config("lamda++ needs --plan"))?;
                    let plan: RankPlan = read_json(&path)?;
                    count_lamda_effective(&spec, &RankAssignment::from_plan(&plan), ti)?
                }
            };
            match format {
                Format::Json => emit(None, &to_json(&report)?)?,
                Format::Csv => report.write_csv(std::io::stdout())?,
            }
        }
        Command::Finetune { config, out } => {
            let dir = finetune(&config, out.as_deref())?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Report { runs, out } => {
            let runs = collect_runs(&runs)?;
            match out {
                Some(p) => report_csv(&runs, std::fs::File::create(p)?)?,
                None => report_csv(&runs, std::io::stdout())?,
            }
        }
    }
    Ok(())
}
