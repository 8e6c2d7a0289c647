//! TOML run configuration. Every section and key is optional; command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use myoseg::inference::InferenceConfig;
use myoseg::phantom::PhantomSpec;
use myoseg::trainer::TrainConfig;
use myoseg::unet::UNetConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[model]\nlevels = 4\n[train.loss]\nepsilon = 1e-6\n").unwrap();
        assert_eq!(cfg.model.levels, 4);
        assert_eq!(cfg.model.base_channels, UNetConfig::default().base_channels);
        assert_eq!(cfg.train.loss.epsilon, 1e-6);
        assert_eq!(cfg.train.epochs, 400);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlayers = 4\n").is_err());
    }

    #[test]
    fn defaults_serialize_and_parse_back() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }
}
