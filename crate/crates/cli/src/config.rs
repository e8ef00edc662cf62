//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! source = "synthetic"        # or "csv" with `path = "data.csv"`
//! standardize = false
//!
//! [dataset.synthetic]
//! outputs = 10
//! replicas = 3
//! points_per_replica = 10
//! kg = { family = "matern32", variance = 0.1, lengthscales = [1.0] }
//!
//! [model]
//! latent_dim = 2
//! inducing_latent = 3
//! inducing = { per_replica = 5 }
//!
//! [optimizer]
//! iterations = 2000
//!
//! [split]
//! mode = "random_fraction"    # or "missing_replica", "none"
//! fraction = 0.5
//!
//! [prediction]
//! mc_samples = 2000
//!
//! [experiment]
//! repeats = 3
//! ```

use std::path::{Path, PathBuf};

use hmogp::data::SyntheticSettings;
use hmogp::training::{ModelConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub standardize: bool,
    pub synthetic: SyntheticSettings,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            standardize: false,
            synthetic: SyntheticSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Train on everything.
    None,
    #[default]
    RandomFraction,
    MissingReplica,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub fraction: f64,
    /// Explicit `(output, replica)` blocks to hold out; when absent one
    /// replica per output is chosen at random.
    pub missing: Option<Vec<(usize, usize)>>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::RandomFraction,
            fraction: 0.5,
            missing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub mc_samples: usize,
    pub include_noise: bool,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            mc_samples: hmogp::prediction::DEFAULT_MC_SAMPLES,
            include_noise: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub split: SplitConfig,
    pub prediction: PredictionConfig,
    pub experiment: ExperimentConfig,
}

fn field(path: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {e}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.dataset.source {
            DataSource::Synthetic => self
                .dataset
                .synthetic
                .validate()
                .map_err(|e| field("dataset.synthetic", e))?,
            DataSource::Csv => {
                if self.dataset.path.is_none() {
                    return Err(field("dataset.path", "required when source = \"csv\""));
                }
            }
        }
        self.model.validate().map_err(|e| field("model", e))?;
        self.optimizer.validate().map_err(|e| field("optimizer", e))?;
        if self.split.mode == SplitMode::RandomFraction
            && !(self.split.fraction > 0.0 && self.split.fraction < 1.0)
        {
            return Err(field("split.fraction", "must lie strictly between 0 and 1"));
        }
        if self.prediction.mc_samples == 0 {
            return Err(field("prediction.mc_samples", "must be at least 1"));
        }
        if self.experiment.repeats == 0 {
            return Err(field("experiment.repeats", "must be at least 1"));
        }
        Ok(())
    }
}
