//! Experiment configuration: one TOML file fully determines a run.

use crate::envs::EnvConfig;
use crate::trainer::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Top-level experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    /// Output directory; usually supplied on the command line instead.
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Seeds fan out to independent runs in disjoint subdirectories.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Checkpoint every this many iterations (0 = only final).
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate(&self.env).map_err(|e: TrainError| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical serialization used for resolved-config snapshots.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Everything a checkpoint needs to rebuild its trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub env: EnvConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: Option<crate::trainer::BaselineKind>,
}

impl RunMeta {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run meta serializes")
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig::ipd(5),
            train: TrainConfig::for_env(EnvKind::Ipd),
            output_dir: None,
            seeds: vec![1, 2],
            checkpoint_interval: 10,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = sample();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        // And a second round trip produces identical bytes.
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = sample().to_toml();
        text.push_str("\nnot_a_key = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Schema(_)));

        let mut nested = sample().to_toml();
        nested = nested.replace("[train]", "[train]\nmystery = true");
        assert!(ExperimentConfig::parse(&nested).is_err());
    }

    #[test]
    fn semantic_validation_runs() {
        let mut cfg = sample();
        cfg.train.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = sample();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = sample();
        cfg.env.num_agents = 3; // ipd is strictly 2-player
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_file_reports_io_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }
}
