//! Run configuration: one TOML file drives training, evaluation, and the
//! CLI. Defaults mirror the full-scale training recipe (Adam at 8e-5,
//! weight decay 0.1, batch 16, 100 epochs, 352×352 inputs) while the
//! dataset block selects either a real `root/{Imgs,GT}` folder or the
//! synthetic generator for desk-scale runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::scalar::Dtype;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Square side all training images are bilinearly resized to.
    pub input_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-5,
            weight_decay: 0.1,
            batch_size: 16,
            epochs: 100,
            input_size: 352,
        }
    }
}

/// Per-channel input normalization applied after scaling to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Procedurally generated camouflage; the train set uses sample
    /// indices `0..count`, the held-out set `count..count+test_count`.
    Synthetic {
        count: usize,
        #[serde(default = "default_test_count")]
        test_count: usize,
        #[serde(default = "default_difficulty")]
        difficulty: f64,
    },
    /// `root/{Imgs,GT}` directories on disk.
    Folder {
        train_root: PathBuf,
        #[serde(default)]
        test_root: Option<PathBuf>,
    },
}

fn default_test_count() -> usize {
    128
}

fn default_difficulty() -> f64 {
    0.7
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            count: 512,
            test_count: default_test_count(),
            difficulty: default_difficulty(),
        }
    }
}

/// Output locations for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Paths {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.out_dir.join("last.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join("best.ckpt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }
}

/// Everything one run needs; checkpoints embed a snapshot of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Dtype,
    pub network: NetworkConfig,
    pub normalization: Normalization,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parse and validate a TOML string.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Read, parse, and validate a TOML file.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML (for `--write-config` style scaffolding).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check the invariants that the type system cannot.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.input_size == 0 || t.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "train.input_size must be a positive multiple of 32, got {}",
                t.input_size
            )));
        }
        if !(t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                t.weight_decay
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization.std entries must be positive".into()));
        }
        match &self.data {
            DataConfig::Synthetic {
                count, difficulty, ..
            } => {
                if *count == 0 {
                    return Err(Error::Config("data.count must be at least 1".into()));
                }
                if !(0.0..=1.0).contains(difficulty) {
                    return Err(Error::Config(format!(
                        "data.difficulty must lie in [0,1], got {difficulty}"
                    )));
                }
            }
            DataConfig::Folder { .. } => {}
        }
        Ok(())
    }
}
