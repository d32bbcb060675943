//! Run configuration file (TOML). Every section and field is optional;
//! missing values take their defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::eval::{EvalConfig, ProbeConfig};
use crate::omni::OmniConfig;
use crate::trainer::TrainerConfig;
use crate::volume::Region;

/// Synthetic dataset written by `gen-phantoms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total volume count, cycling through `regions`.
    pub count: usize,
    pub dims: [usize; 3],
    pub regions: Vec<Region>,
    /// Leading fraction of volumes that keep their labels.
    pub labeled_fraction: f64,
    /// Trailing fraction of volumes placed in the evaluation split.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 200, dims: [64, 64, 64], regions: Region::ALL.to_vec(), labeled_fraction: 0.1, eval_fraction: 0.0, seed: 11 }
    }
}

impl DataConfig {
    pub fn labeled_count(&self) -> usize {
        (self.count as f64 * self.labeled_fraction).round() as usize
    }

    pub fn eval_count(&self) -> usize {
        (self.count as f64 * self.eval_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(format!("data: {m}")));
        if self.regions.is_empty() {
            return bad("regions must not be empty");
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) || !(0.0..=1.0).contains(&self.eval_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.labeled_count() + self.eval_count() > self.count {
            return bad("labeled and eval fractions overlap");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub omni: OmniConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// A seed override applies to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.trainer.seed = seed;
        self.eval.seed = seed;
    }
}
