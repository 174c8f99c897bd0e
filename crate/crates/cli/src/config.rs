//! `--config` JSON file. Every field is optional; command-line flags win.

use std::path::{Path, PathBuf};

use hdre_core::metrics::Method;
use hdre_core::training::TrainConfig;
use hdre_core::{Error, Result};
use serde::Deserialize;

/// Seed used when neither a flag nor the config file gives one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub hdr_dir: Option<PathBuf>,
    /// Output directory for `synth`, `train`, `eval` and `scenes`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Output directory for `eval` reports; falls back to `data_dir`.
    pub report: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub train: Option<TrainConfig>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }
}

/// Picks the flag, else the config value, else fails naming the flag.
pub fn required(flag: Option<PathBuf>, config: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.cloned())
        .ok_or_else(|| Error::Input(format!("missing --{name} (flag or config file)")))
}

pub fn existing_dir(path: PathBuf, name: &str) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Input(format!("--{name} {} is not a directory", path.display())))
    }
}

pub fn existing_file(path: PathBuf, name: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Input(format!("--{name} {} does not exist", path.display())))
    }
}
