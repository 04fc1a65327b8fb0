//! Run configuration: one JSON document, every field optional.

use std::path::Path;

use immunofuse_core::eval::baselines::BaselineConfig;
use immunofuse_core::eval::bootstrap::DEFAULT_RESAMPLES;
use immunofuse_core::eval::contribution::{DEFAULT_MASK_SEED, DEFAULT_RHOS};
use immunofuse_core::eval::permutation::PermutationConfig;
use immunofuse_core::features::PrepareConfig;
use immunofuse_core::model::ModelConfig;
use immunofuse_core::train::TrainConfig;
use immunofuse_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const WORKERS_ENV: &str = "IMMUNOFUSE_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            resamples: DEFAULT_RESAMPLES,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSettings {
    pub rhos: Vec<f64>,
    pub mask_seed: u64,
}

impl Default for DegradationSettings {
    fn default() -> Self {
        DegradationSettings {
            rhos: DEFAULT_RHOS.to_vec(),
            mask_seed: DEFAULT_MASK_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Used only when the dataset has no split file.
    pub split_seed: u64,
    pub workers: usize,
    pub bootstrap: BootstrapSettings,
    pub permutation: PermutationConfig,
    pub degradation: DegradationSettings,
    pub baselines: BaselineConfig,
    pub prepare: PrepareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split_seed: 42,
            workers: 1,
            bootstrap: BootstrapSettings::default(),
            permutation: PermutationConfig::default(),
            degradation: DegradationSettings::default(),
            baselines: BaselineConfig::default(),
            prepare: PrepareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.workers == 0 || self.permutation.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        if self.bootstrap.resamples == 0 {
            return Err(Error::config("bootstrap resamples must be positive"));
        }
        Ok(())
    }

    /// Worker count from the environment, if set, replaces the file value.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            let w: usize = v
                .parse()
                .map_err(|_| Error::config(format!("{WORKERS_ENV}='{v}' is not a count")))?;
            self.workers = w;
            self.permutation.workers = w;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_strictness() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 1e-2);
        assert_eq!(cfg.model.modality_dropout_p, 0.4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1}}"#).is_err());
    }

    #[test]
    fn patience_beyond_epochs_rejected() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"patience": 80, "max_epochs": 60}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
