//! Run configuration: JSON file consumed by `laneid train`, field names
//! mirror the struct.

use std::fs;
use std::path::{Path, PathBuf};

use laneid_core::brightness::BrightnessConfig;
use laneid_core::decision::DecisionCriterion;
use laneid_core::model::ModelConfig;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Horizontal flip of all frames plus label mirror, probability 1/2.
    pub flip: bool,
    /// Per-sequence multiplicative brightness factor in [0.9, 1.1].
    pub brightness_jitter: bool,
    /// Additive pixel noise in [-8, 8], one field per sequence.
    pub noise: bool,
    /// Horizontal crop of up to 4 columns, nearest-resized back.
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, brightness_jitter: true, noise: true, crop: true }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { flip: false, brightness_jitter: false, noise: false, crop: false }
    }
}

/// Everything `train` needs; evaluation-time knobs (brightness, criterion)
/// carry defaults for harness runs built from this config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_sequence_length")]
    pub sequence_length: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Multiplies the learning-rate schedule thresholds (1.0 = full scale).
    #[serde(default = "default_schedule_scale")]
    pub schedule_scale: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "BrightnessConfig::disabled")]
    pub brightness: BrightnessConfig,
    #[serde(default = "default_criterion")]
    pub criterion: DecisionCriterion,
    /// Offset added to the argmax ID before the adaptive loss weight.
    #[serde(default)]
    pub z_offset: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub train_data: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[serde(default)]
    pub log: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    2
}
fn default_sequence_length() -> usize {
    4
}
fn default_iterations() -> u64 {
    2000
}
fn default_schedule_scale() -> f64 {
    0.01
}
fn default_criterion() -> DecisionCriterion {
    DecisionCriterion::MaxMinusMean
}
fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn defaults_with_data(train_data: PathBuf) -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch_size(),
            sequence_length: default_sequence_length(),
            iterations: default_iterations(),
            schedule_scale: default_schedule_scale(),
            augment: AugmentConfig::default(),
            brightness: BrightnessConfig::disabled(),
            criterion: default_criterion(),
            z_offset: 0.0,
            seed: default_seed(),
            train_data,
            log: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 1 {
            return Err(Error::Config { detail: "batch_size must be >= 1".into() });
        }
        if self.sequence_length < 1 {
            return Err(Error::Config { detail: "sequence_length must be >= 1".into() });
        }
        if self.schedule_scale <= 0.0 {
            return Err(Error::Config { detail: "schedule_scale must be positive".into() });
        }
        Ok(())
    }
}
