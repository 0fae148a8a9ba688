//! TOML run configuration covering every tunable constant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::DataConfig;
use crate::error::{read_to_string, Error, Result};
use crate::experiment::ExperimentConfig;
use crate::sampler::SamplerConfig;
use crate::train::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub serve: ServeConfig,
}

/// Generation service and `generate` command settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub port: u16,
    pub sampler: SamplerConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            port: 8080,
            sampler: SamplerConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path.as_ref())?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        let e = &self.experiment;
        if e.etas.is_empty() || e.etas.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("experiment.etas must be non-empty and >= 0".into()));
        }
        if e.generations == 0 || e.steps == 0 || !(e.cfg_scale.is_finite() && e.cfg_scale >= 0.0) {
            return Err(Error::Config("experiment needs generations >= 1, steps >= 1, cfg_scale >= 0".into()));
        }
        let s = &self.serve.sampler;
        if s.steps == 0 || !(s.cfg_scale.is_finite() && s.cfg_scale >= 0.0) || !(s.cond_scale.is_finite() && s.cond_scale >= 0.0) {
            return Err(Error::Config("serve.sampler needs steps >= 1 and non-negative scales".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml_str("[train]\neta = 0.0\n[model]\nimage_size = 32\ncond_resolution = 32\n").unwrap();
        assert_eq!(cfg.train.eta, 0.0);
        assert_eq!(cfg.model.image_size, 32);
        assert_eq!(cfg.train.lr, 1e-5);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(Config::from_toml_str("[train]\nbogus = 1\n").is_err());
        assert!(Config::from_toml_str("[train]\nprompt_drop_prob = 2.0\n").is_err());
    }
}
