//! Low-rank adapters on the attention query and value projections.
//!
//! Each wrapped site gets a pair A `[r x d]`, B `[d x r]` with B zeroed at
//! init, so a fresh adapter is an exact identity. The wrapped projection
//! computes `x W + (alpha/r) * (x A^T) B^T`; merging folds
//! `(alpha/r) * (B A)^T` into the stored weight. The base model is frozen
//! at attach time and never touched by adapter training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::model::{ParamStore, Seq2SeqModel};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("invalid LoRA config: {0}")]
    InvalidConfig(String),
    #[error("model has no attention site {0}")]
    MissingSite(String),
    #[error("no attention sites selected by the target flags")]
    NoSites,
    #[error("adapter was built for d_model {adapter}, model has d_model {model}")]
    DModelMismatch { adapter: usize, model: usize },
    #[error("checkpoint kind {found:?}, expected \"lora\"")]
    WrongKind { found: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which attention blocks get wrapped. The paper names the self-attention
/// q/v projections; decoder cross-attention is wrapped as well by default
/// and can be switched off here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraTargets {
    pub encoder_self: bool,
    pub decoder_self: bool,
    pub decoder_cross: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets {
            encoder_self: true,
            decoder_self: true,
            decoder_cross: true,
        }
    }
}

impl LoraTargets {
    fn selects(&self, site: &str) -> bool {
        if site.starts_with("enc.") {
            self.encoder_self
        } else if site.contains(".self_attn.") {
            self.decoder_self
        } else {
            self.decoder_cross
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Dropout on the adapter-branch input, training forwards only.
    pub dropout: f64,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            targets: LoraTargets::default(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_model: usize) -> Result<(), LoraError> {
        if self.rank == 0 || self.rank >= d_model {
            return Err(LoraError::InvalidConfig(format!(
                "rank {} must satisfy 1 <= r < d_model ({d_model})",
                self.rank
            )));
        }
        if self.alpha <= 0.0 {
            return Err(LoraError::InvalidConfig(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LoraError::InvalidConfig(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Adapter state: one (A, B) pair per wrapped site, stored as trainable
/// parameters `{site}.a` / `{site}.b`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub base_d_model: usize,
    pub params: ParamStore,
    sites: Vec<String>,
}

impl LoraAdapter {
    /// The `alpha / r` branch scale.
    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn wraps(&self, site: &str) -> bool {
        self.sites.iter().any(|s| s == site)
    }

    /// (A, B) values for a wrapped site.
    pub fn pair(&self, site: &str) -> (&Tensor, &Tensor) {
        let a = &self.params.get(&format!("{site}.a")).expect("site a").value;
        let b = &self.params.get(&format!("{site}.b")).expect("site b").value;
        (a, b)
    }

    pub fn validate_for(&self, model: &Seq2SeqModel) -> Result<(), LoraError> {
        if self.base_d_model != model.config.d_model {
            return Err(LoraError::DModelMismatch {
                adapter: self.base_d_model,
                model: model.config.d_model,
            });
        }
        for site in &self.sites {
            if !model.params.contains(site) {
                return Err(LoraError::MissingSite(site.clone()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LoraError> {
        self.save_as(path, "lora")
    }

    /// Save under an explicit kind tag ("lora" for SFT adapters,
    /// "ppo-policy" for phase-3 policies).
    pub fn save_as(&self, path: &Path, kind: &str) -> Result<(), LoraError> {
        let header = serde_json::json!({
            "lora": self.config,
            "base_d_model": self.base_d_model,
            "sites": self.sites,
        });
        checkpoint::save_checkpoint(
            path,
            kind,
            header,
            BTreeMap::new(),
            &self.params.to_tensors(),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        let ck = checkpoint::load_checkpoint(path)?;
        // Phase-3 policy checkpoints share the adapter layout.
        if ck.kind != "lora" && ck.kind != "ppo-policy" {
            return Err(LoraError::WrongKind { found: ck.kind });
        }
        let config: LoraConfig = serde_json::from_value(ck.config["lora"].clone())
            .map_err(|e| LoraError::InvalidConfig(format!("checkpoint header: {e}")))?;
        let base_d_model = ck.config["base_d_model"]
            .as_u64()
            .ok_or_else(|| LoraError::InvalidConfig("missing base_d_model".to_string()))?
            as usize;
        let sites: Vec<String> = serde_json::from_value(ck.config["sites"].clone())
            .map_err(|e| LoraError::InvalidConfig(format!("checkpoint sites: {e}")))?;
        Ok(LoraAdapter {
            config,
            base_d_model,
            params: ParamStore::from_tensors(ck.tensors),
            sites,
        })
    }

    /// Load and check compatibility with a base model in one step.
    pub fn load_for(path: &Path, model: &Seq2SeqModel) -> Result<Self, LoraError> {
        let adapter = Self::load(path)?;
        adapter.validate_for(model)?;
        Ok(adapter)
    }

    /// Rebuild an adapter from checkpointed pieces (trainer resume).
    pub fn from_parts(
        config: LoraConfig,
        base_d_model: usize,
        tensors: BTreeMap<String, Tensor>,
        sites: Vec<String>,
    ) -> Self {
        LoraAdapter {
            config,
            base_d_model,
            params: ParamStore::from_tensors(tensors),
            sites,
        }
    }
}

/// Create an adapter for the model's q/v projections and freeze the base.
/// A is uniform(-1/sqrt(d), +1/sqrt(d)) from the seed, B starts at zero, so
/// the wrapped model is bit-identical to the base until training moves B.
pub fn attach(
    model: &mut Seq2SeqModel,
    config: LoraConfig,
    seed: u64,
) -> Result<LoraAdapter, LoraError> {
    let d = model.config.d_model;
    config.validate(d)?;
    let sites: Vec<String> = model
        .attention_sites()
        .into_iter()
        .filter(|s| config.targets.selects(s))
        .collect();
    if sites.is_empty() {
        return Err(LoraError::NoSites);
    }
    for site in &sites {
        if !model.params.contains(site) {
            return Err(LoraError::MissingSite(site.clone()));
        }
    }

    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, rng::stream::LORA_INIT));
    let bound = 1.0 / (d as f64).sqrt();
    let r = config.rank;
    let mut params = ParamStore::new();
    for site in &sites {
        let a: Vec<f64> = (0..r * d)
            .map(|_| rng::uniform(&mut rng, -bound, bound))
            .collect();
        params.insert(format!("{site}.a"), Tensor::matrix(r, d, a).expect("lora a"));
        params.insert(format!("{site}.b"), Tensor::zeros(vec![d, r]));
    }

    model.params.freeze_all(true);
    Ok(LoraAdapter {
        config,
        base_d_model: d,
        params,
        sites,
    })
}

/// Fold the adapter into a standalone model: `W' = W + (alpha/r) (B A)^T`
/// at every wrapped site (transposed because weights here act as `x W`).
pub fn merge(model: &Seq2SeqModel, adapter: &LoraAdapter) -> Result<Seq2SeqModel, LoraError> {
    adapter.validate_for(model)?;
    let d = model.config.d_model;
    let r = adapter.config.rank;
    let scale = adapter.scale();
    let mut merged = model.clone();
    for site in adapter.sites() {
        let (a, b) = adapter.pair(site);
        // (B A)^T = A^T B^T, computed directly: delta[i][j] = sum_k A[k][i] * B[j][k]
        let mut delta = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..r {
                    s += a.data()[k * d + i] * b.data()[j * r + k];
                }
                delta[i * d + j] = s;
            }
        }
        let p = merged.params.get_mut(site).expect("validated site");
        for (w, dv) in p.value.data_mut().iter_mut().zip(&delta) {
            *w += scale * dv;
        }
    }
    merged.params.freeze_all(false);
    Ok(merged)
}
