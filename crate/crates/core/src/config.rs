//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::frameworks::train::TrainConfig;
use crate::hallucinator::HallucinatorConfig;
use crate::metrics::{MetricsConfig, ProbeConfig};
use crate::nn::EncoderConfig;

/// Seed used when neither the command line nor the config file sets one.
pub const DEFAULT_SEED: u64 = 42;

/// File name of the resolved-config echo written next to run outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// CIFAR-format training data: a single batch file or a directory of `*.bin` batches.
    pub dataset: Option<PathBuf>,
    /// Optional separate evaluation set for the probe and metrics.
    pub eval_dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub hallucinator: HallucinatorConfig,
    pub metrics: MetricsConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        self.hallucinator.validate()?;
        self.metrics.validate()?;
        self.probe.validate()
    }

    /// Copy with the seed made explicit, as written to the run directory.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: Some(self.resolved_seed()),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.resolved().to_json()? + "\n")?;
        Ok(path)
    }
}

/// Parses and validates a config from JSON text; missing fields take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}
