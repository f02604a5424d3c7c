//! Experiment configuration: one TOML document with a table per subsystem,
//! §-style defaults baked in, and seed resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError};
use crate::mobility::{MobilityError, MobilityParams};
use crate::model::{ModelConfig, ModelError};
use crate::trainer::{TrainConfig, TrainError};

/// Environment variable consulted when no `--seed` flag is given.
pub const SEED_VAR: &str = "APDT_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid deploy config: {0}")]
    Deploy(String),
    #[error("{SEED_VAR} is set but not a u64: {0:?}")]
    BadSeedVar(String),
}

/// Online-deployment knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployConfig {
    /// Online prompt buffer capacity O.
    pub buffer_capacity: usize,
    /// Episode budget for one deployment run.
    pub max_episodes: usize,
    /// Episodes per evaluation sweep.
    pub eval_episodes: usize,
    /// Average user densities swept by deploy/ablate.
    pub densities: Vec<f64>,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 500,
            max_episodes: 20,
            eval_episodes: 20,
            densities: vec![15.0, 20.0, 25.0],
        }
    }
}

impl DeployConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.buffer_capacity == 0 || self.max_episodes == 0 || self.eval_episodes == 0 {
            return Err(ConfigError::Deploy(
                "buffer_capacity, max_episodes and eval_episodes must be >= 1".into(),
            ));
        }
        if self.densities.is_empty() || self.densities.iter().any(|d| *d <= 0.0 || !d.is_finite())
        {
            return Err(ConfigError::Deploy(
                "densities must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Where artifacts live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// The whole experiment: every constant has its reference default, so an
/// empty TOML file is a valid full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Experiment seed; `--seed` and `APDT_SEED` take precedence, and the
    /// resolved value also replaces `train.seed`.
    pub seed: u64,
    pub env: EnvConfig,
    pub mobility: MobilityParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub deploy: DeployConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Parses a TOML file; a missing file is an error, not a silent default.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate()?;
        self.mobility.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.deploy.validate()?;
        Ok(())
    }

    /// Applies the seed priority `--seed` > `APDT_SEED` > config value and
    /// propagates the winner into the train config.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, ConfigError> {
        let seed = match flag {
            Some(s) => s,
            None => match std::env::var(SEED_VAR) {
                Ok(v) => v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| ConfigError::BadSeedVar(v))?,
                Err(_) => self.seed,
            },
        };
        self.seed = seed;
        self.train.seed = seed;
        Ok(seed)
    }
}
