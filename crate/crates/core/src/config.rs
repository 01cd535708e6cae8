//! JSON run configuration for `finetune`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{ToyConfig, ToyModel};
use crate::task::TaskKind;
use crate::tensor::Precision;
use crate::train::{pretrain, Checkpoint, TrainRunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub task: TaskKind,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    /// A dense checkpoint container.
    Weights(PathBuf),
    Pretrain(PretrainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ToyConfig,
    pub backbone: BackboneSource,
    pub run: TrainRunConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfigFile::from_json(&text)?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        if let BackboneSource::Weights(w) = &mut cfg.backbone {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.run.validate()?;
        if let BackboneSource::Pretrain(p) = &self.backbone {
            if p.batch == 0 || !(p.learning_rate >= 0.0) {
                return Err(Error::config("pretrain batch and learning rate must be positive"));
            }
        }
        Ok(())
    }

    /// Configured precision unless `LDA_FLOAT_MODE` overrides it.
    pub fn effective_precision(&self) -> Result<Precision> {
        Ok(Precision::from_env()?.unwrap_or(self.precision))
    }

    pub fn load_backbone(&self, precision: Precision) -> Result<ToyModel> {
        match &self.backbone {
            BackboneSource::Pretrain(p) => {
                pretrain(self.model, p.task, p.steps, p.learning_rate, p.batch, p.seed, precision)
            }
            BackboneSource::Weights(path) => {
                let ck = Checkpoint::from_container(&Container::load(path)?)?;
                if ck.model.config != self.model {
                    return Err(Error::config(format!(
                        "backbone {} has config {:?}, run expects {:?}",
                        path.display(),
                        ck.model.config,
                        self.model
                    )));
                }
                let mut model = ck.model;
                model.train_backbone = false;
                Ok(model)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "model": {"layers": 1, "d_model": 8, "heads": 2, "ffn_dim": 16, "vocab": 12, "context": 7},
        "backbone": {"pretrain": {"task": "copy", "steps": 5, "learning_rate": 0.01, "batch": 2, "seed": 1}},
        "run": {"method": "lamda", "rank": 2, "steps": 3, "adam": {"learning_rate": 0.01},
                "batch": 2, "seed": 0, "task": "reverse"}
    }"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = RunConfigFile::from_json(SMOKE).unwrap();
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.run.alpha, 1.0);
        assert!(cfg.model.causal);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SMOKE.replace("\"seed\": 0,", "\"seed\": 0, \"warmup\": 5,");
        let err = RunConfigFile::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("warmup"));
        assert_eq!(err.exit_code(), 2);
        let bad = SMOKE.replace("\"adam\": {\"learning_rate\": 0.01}", "\"adam\": {\"learning_rate\": 0.01, \"decay\": 1}");
        assert!(RunConfigFile::from_json(&bad).is_err());
    }

    #[test]
    fn semantic_validation() {
        let bad = SMOKE.replace("\"rank\": 2,", "");
        assert!(RunConfigFile::from_json(&bad).is_err());
    }
}
