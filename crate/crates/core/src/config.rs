//! Experiment configuration: one JSON document drives every run.
//!
//! The schema is strict — unknown keys are rejected — and every output file
//! embeds a hash of the effective configuration, so any change to any knob
//! changes the hash and therefore the run identity.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::AdaptConfig;
use crate::error::{Error, Result};
use crate::metrics::ScoreKind;
use crate::model::PretrainConfig;
use crate::scenarios::ScenarioSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub sigma_clean: f64,
    pub min_separation_deg: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

fn default_tpr() -> f64 {
    0.95
}

fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_tpr")]
    pub tpr_target: f64,
    #[serde(default)]
    pub score: ScoreKind,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { tpr_target: default_tpr(), score: ScoreKind::default(), histogram_bins: default_bins() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub scenario: ScenarioSpec,
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.classes < 2 {
            return Err(Error::InvalidConfig("task.classes must be >= 2".into()));
        }
        if self.task.feature_dim < 2 {
            return Err(Error::InvalidConfig("task.feature_dim must be >= 2".into()));
        }
        if self.task.samples_per_class < 1 {
            return Err(Error::InvalidConfig("task.samples_per_class must be >= 1".into()));
        }
        if !(self.task.sigma_clean > 0.0) {
            return Err(Error::InvalidConfig("task.sigma_clean must be > 0".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.iter().any(|&w| w < 1) {
            return Err(Error::InvalidConfig("model.hidden must be nonempty positive widths".into()));
        }
        self.pretrain.validate()?;
        self.scenario.validate()?;
        self.adapt.validate()?;
        if !(0.0 < self.metrics.tpr_target && self.metrics.tpr_target <= 1.0) {
            return Err(Error::InvalidConfig("metrics.tpr_target must be in (0, 1]".into()));
        }
        if self.metrics.histogram_bins < 1 {
            return Err(Error::InvalidConfig("metrics.histogram_bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of the full effective configuration; the run identity.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Hash over the sections that determine the checkpoint (task, model,
    /// pretrain); scenario/adapt changes leave it alone so one checkpoint
    /// serves many adaptation runs.
    pub fn pretrain_hash(&self) -> Result<String> {
        let doc = serde_json::json!({
            "task": self.task,
            "model": self.model,
            "pretrain": self.pretrain,
        });
        Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        let hash = self.pretrain_hash()?;
        Ok(self.output_dir.join(format!("checkpoint-{}.json", &hash[..12])))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)
}

/// 12-hex-character run id derived from the full config hash.
pub fn run_id(hash: &str) -> &str {
    &hash[..12]
}
