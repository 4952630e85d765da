//! Engine configuration file (TOML), one table per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::mel::MelConfig;
use crate::phase::DmConfig;

/// Directory searched for [`CONFIG_FILE_NAME`] when no file is given.
pub const CONFIG_DIR_ENV: &str = "MELVOC_CONFIG_DIR";
pub const CONFIG_FILE_NAME: &str = "melvoc.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub flow: FlowConfig,
    pub rtisi: DmConfig,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The file in `$MELVOC_CONFIG_DIR` if there is one, else defaults.
    pub fn load_default() -> Result<Self> {
        match default_config_path() {
            Some(p) if p.exists() => Self::load(p),
            _ => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.flow.validate()?;
        self.rtisi.validate()?;
        if self.mel.n_mels == 0 || self.mel.n_mels >= self.stft.n_bins() {
            return Err(Error::Config(format!(
                "n_mels must be in 1..{}, got {}",
                self.stft.n_bins(),
                self.mel.n_mels
            )));
        }
        Ok(())
    }
}

pub fn default_config_path() -> Option<PathBuf> {
    std::env::var_os(CONFIG_DIR_ENV).map(|d| PathBuf::from(d).join(CONFIG_FILE_NAME))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = EngineConfig::default();
        assert_eq!(EngineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = EngineConfig::from_toml("[flow]\nn_steps = 3\n").unwrap();
        assert_eq!(partial.flow.n_steps, 3);
        assert_eq!(partial.stft, StftConfig::default());
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(EngineConfig::from_toml("[flow]\nsigma_y = -1.0\n"), Err(Error::Config(_))));
        assert!(matches!(EngineConfig::from_toml("[stft]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(EngineConfig::from_toml("[rtisi]\nbeta = 0.0\n"), Err(Error::Config(_))));
    }
}
