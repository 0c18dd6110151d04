//! Run configuration and run-directory conventions.
//!
//! A run is described by one JSON document with a strict schema: unknown
//! keys are rejected with the offending path. Field defaults reproduce the
//! paper-derived per-module defaults, so `{}` is a valid config.
//!
//! One global seed drives everything: [`RunConfig::resolve`] copies it into
//! each phase's seed slot, and the phases separate their random streams
//! internally through tagged splitmix64 derivation (see [`crate::rng`]),
//! so any phase can be rerun on its own and reproduce exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::LoraConfig;
use crate::model::{ModelConfig, SamplingConfig};
use crate::ppo::PPOConfig;
use crate::reward::RewardConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("output directory {0} exists and is not empty (pass --force to overwrite)")]
    OutDirNotEmpty(String),
}

/// Dataset and word-list file locations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub explanations_path: Option<PathBuf>,
    pub explanations_dev_path: Option<PathBuf>,
    pub cs_path: Option<PathBuf>,
    /// JSON template overrides (task id -> template string).
    pub templates_path: Option<PathBuf>,
    /// Preamble text for few-shot prompts.
    pub preamble_path: Option<PathBuf>,
}

/// Evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_new_tokens: 64 }
    }
}

/// The whole run: one seed plus per-module configs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default = "TrainConfig::phase1")]
    pub phase1: TrainConfig,
    #[serde(default = "TrainConfig::phase2")]
    pub phase2: TrainConfig,
    pub lora: LoraConfig,
    pub ppo: PPOConfig,
    pub reward: RewardConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub sampling: SamplingConfig,
}

impl RunConfig {
    /// Parse with strict unknown-key rejection; errors carry the JSON path
    /// of the offending key.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                path: origin.to_string(),
                detail: format!("{} (at {})", e.inner(), e.path()),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.lora
            .validate(self.model.d_model)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampling
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Fan the global seed out into every phase. Phase streams stay
    /// disjoint through per-phase stream tags inside the trainers.
    pub fn resolve(&self, seed_override: Option<u64>) -> RunConfig {
        let mut cfg = self.clone();
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.phase1.seed = cfg.seed;
        cfg.phase2.seed = cfg.seed;
        cfg.ppo.seed = cfg.seed;
        cfg.sampling.seed = crate::rng::derive_seed(cfg.seed, crate::rng::stream::GENERATE);
        cfg
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The four standard entries of a run directory.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub generations: PathBuf,
}

/// Create `out_dir/{config.json, checkpoints/, metrics/, generations/}`.
/// The resolved config is written before any training step, so a run is
/// reproducible from its directory alone. A non-empty `out_dir` is refused
/// unless `force` is set, in which case it is replaced.
pub fn prepare_run_directory(
    out_dir: &Path,
    resolved: &RunConfig,
    force: bool,
) -> Result<RunDirs, ConfigError> {
    let io = |e: std::io::Error| ConfigError::Io {
        path: out_dir.display().to_string(),
        source: e,
    };
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir).map_err(io)?.next().is_some();
        if non_empty {
            if !force {
                return Err(ConfigError::OutDirNotEmpty(out_dir.display().to_string()));
            }
            std::fs::remove_dir_all(out_dir).map_err(io)?;
        }
    }
    let dirs = RunDirs {
        root: out_dir.to_path_buf(),
        config_path: out_dir.join("config.json"),
        checkpoints: out_dir.join("checkpoints"),
        metrics: out_dir.join("metrics"),
        generations: out_dir.join("generations"),
    };
    for d in [&dirs.root, &dirs.checkpoints, &dirs.metrics, &dirs.generations] {
        std::fs::create_dir_all(d).map_err(io)?;
    }
    std::fs::write(&dirs.config_path, resolved.to_json_pretty()).map_err(io)?;
    Ok(dirs)
}
