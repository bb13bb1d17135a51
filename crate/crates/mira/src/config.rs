//! Run configuration: TOML-backed settings resolving into an environment
//! config, hyperparameters, and run-directory bookkeeping, with a stable
//! content hash for manifests and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::train::HParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    /// Output directory for checkpoints, logs, and summaries.
    pub run_dir: Option<PathBuf>,
    /// Number of task instances generated into the pool.
    pub pool_size: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            run_dir: None,
            pool_size: 8,
        }
    }
}

/// The full resolved configuration of one run: `[env]`, `[hparams]`, `[run]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub hparams: HParams,
    #[serde(default)]
    pub run: RunSettings,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    schema_version: u32,
    package_version: &'a str,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hparams
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.pool_size == 0 {
            return Err(ConfigError::Invalid("pool_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable FNV-1a hash over the canonical JSON form of the environment
    /// and hyperparameter sections. Output-location settings are excluded so
    /// the same experiment hashes identically wherever its artifacts land.
    pub fn config_hash(&self) -> u64 {
        let blob = serde_json::to_string(&(&self.env, &self.hparams))
            .expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in blob.as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }

    /// Write the frozen resolved config and a machine-readable manifest into
    /// the run directory. Output is deterministic (no timestamps).
    pub fn freeze(&self, run_dir: &Path) -> Result<(), ConfigError> {
        std::fs::create_dir_all(run_dir)?;
        let toml_text = toml::to_string_pretty(self)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(run_dir.join("resolved_config.toml"), toml_text)?;
        let manifest = Manifest {
            config_hash: format!("{:016x}", self.config_hash()),
            seed: self.hparams.seed,
            schema_version: crate::trajectory::SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION"),
        };
        std::fs::write(
            run_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}
