//! Phase 3: PPO over the LoRA policy against the composite reward.
//!
//! The policy is the SFT adapter cloned at start (the base stays frozen
//! throughout). Each batch: sample responses, score them, shape per-token
//! rewards with the KL penalty `-beta * (log pi_RL - log pi_SFT)`, broadcast
//! the whitened per-sequence return as the advantage, then run clipped-ratio
//! updates for several epochs of shuffled mini-batches. An adaptive
//! controller nudges `beta` toward the target KL.
//!
//! The per-token KL uses the sampled-token log-ratio estimator (an unbiased
//! estimate of KL(pi_RL || pi_SFT) under pi_RL samples); the exact
//! full-vocabulary KL is available via [`full_vocab_kl`] for tests.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::tokenize;
use crate::lora::{LoraAdapter, LoraError};
use crate::model::{forward_on_tape, ModelError, Seq2SeqModel};
use crate::reward::{composite_reward, RewardBreakdown, RewardError, ScorerSet};
use crate::rng;
use crate::tensor::{log_softmax_raw, Tape, Tensor, TensorError};
use crate::train::{AdamState, MetricsLog, TrainError};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid PPO config: {0}")]
    BadConfig(String),
    #[error("phase 3 requires a fully frozen base model")]
    UnfrozenBase,
    #[error("batch {batch}: {source}")]
    AtBatch {
        batch: usize,
        #[source]
        source: Box<PpoError>,
    },
}

/// PPO hyperparameters; defaults follow the paper's phase-3 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub learning_rate: f64,
    pub init_kl_coeff: f64,
    pub adaptive_target: f64,
    pub horizon: f64,
    pub cliprange: f64,
    pub batch_size: usize,
    pub mini_batch_size: usize,
    pub total_steps: usize,
    pub ppo_epochs: usize,
    pub seed: u64,
    /// Rollout length cap (desk default 64; the paper decodes up to 512).
    pub max_new_tokens: usize,
    /// Save the policy every this many batches.
    pub checkpoint_every: usize,
    /// Optional early stop on mean per-token KL (the paper's Target_kl
    /// 0.05); disabled by default.
    pub per_token_kl_stop: Option<f64>,
    pub checkpoint_dir: PathBuf,
    /// Metrics CSV directory; defaults to `checkpoint_dir`.
    pub metrics_dir: Option<PathBuf>,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            learning_rate: 1.4e-6,
            init_kl_coeff: 0.03,
            adaptive_target: 5.0,
            horizon: 10000.0,
            cliprange: 0.25,
            batch_size: 32,
            mini_batch_size: 2,
            total_steps: 15000,
            ppo_epochs: 5,
            seed: 0,
            max_new_tokens: 64,
            checkpoint_every: 50,
            per_token_kl_stop: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_dir: None,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if !(self.cliprange > 0.0 && self.cliprange < 1.0) {
            return Err(PpoError::BadConfig(format!(
                "cliprange {} must be in (0, 1)",
                self.cliprange
            )));
        }
        if self.init_kl_coeff <= 0.0 {
            return Err(PpoError::BadConfig(format!(
                "init_kl_coeff {} must be positive",
                self.init_kl_coeff
            )));
        }
        if self.mini_batch_size == 0 || self.batch_size % self.mini_batch_size != 0 {
            return Err(PpoError::BadConfig(format!(
                "mini_batch_size {} must divide batch_size {}",
                self.mini_batch_size, self.batch_size
            )));
        }
        if self.horizon <= 0.0 {
            return Err(PpoError::BadConfig("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// What the policy conditions on, and what the reward scorers see as the
/// topic (the instruction-formatted prompt, or raw hate speech when
/// `score_on_raw_hs` is configured).
#[derive(Debug, Clone)]
pub struct RolloutPrompt {
    pub text: String,
    pub topic: String,
}

impl RolloutPrompt {
    /// Topic defaults to the model input.
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        RolloutPrompt {
            topic: text.clone(),
            text,
        }
    }
}

/// Reward source for rollouts. A scorer failure aborts the batch; no
/// default reward is substituted.
pub trait RewardFn: Sync {
    fn reward(&self, topic: &str, response: &str) -> Result<RewardBreakdown, RewardError>;
}

/// The composite stance/quality/toxicity reward.
pub struct CompositeRewardFn {
    pub scorers: ScorerSet,
}

impl RewardFn for CompositeRewardFn {
    fn reward(&self, topic: &str, response: &str) -> Result<RewardBreakdown, RewardError> {
        composite_reward(topic, response, &self.scorers)
    }
}

/// One sampled trajectory with everything the update needs.
#[derive(Debug, Clone)]
pub struct RolloutItem {
    pub prompt: RolloutPrompt,
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
    pub response_text: String,
    /// Per-token log-probs under the policy at sampling time.
    pub logprobs_rl: Vec<f64>,
    /// Per-token log-probs under the frozen SFT reference.
    pub logprobs_sft: Vec<f64>,
    pub reward: RewardBreakdown,
    /// Sampled-token KL estimates `logprobs_rl - logprobs_sft`.
    pub kl_per_token: Vec<f64>,
    /// `-beta * kl_t`, plus the sequence reward at the final token.
    pub shaped_rewards: Vec<f64>,
    /// Whitened per-sequence return, broadcast over tokens.
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub items: Vec<RolloutItem>,
}

/// Zero-mean unit-variance normalization (population variance); pure
/// centering when the variance is zero.
pub fn whiten(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let std = var.sqrt();
        values.iter().map(|v| (v - mean) / std).collect()
    } else {
        values.iter().map(|v| v - mean).collect()
    }
}

/// Sample responses for a batch of prompts and assemble everything the
/// PPO update consumes.
#[allow(clippy::too_many_arguments)]
pub fn generate_rollouts(
    model: &Seq2SeqModel,
    policy: &LoraAdapter,
    sft: &LoraAdapter,
    prompts: &[RolloutPrompt],
    reward_fn: &dyn RewardFn,
    beta: f64,
    cfg: &PPOConfig,
    batch_index: usize,
) -> Result<RolloutBatch, PpoError> {
    let phase_seed = rng::derive_seed(cfg.seed, rng::stream::PHASE3);
    let mut items = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let prompt_ids = tokenize(&prompt.text, model.config.max_seq_len).ids;
        let sampling = crate::model::SamplingConfig::ancestral(
            cfg.max_new_tokens,
            rng::derive_seed2(phase_seed, 10_000 + batch_index as u64, i as u64),
        );
        let response_ids = model.generate(&prompt_ids, &sampling, Some(policy))?;
        let logprobs_rl = model.sequence_logprob(&prompt_ids, &response_ids, Some(policy))?;
        let logprobs_sft = model.sequence_logprob(&prompt_ids, &response_ids, Some(sft))?;
        let response_text = crate::data::detokenize(&response_ids);
        let reward = reward_fn.reward(&prompt.topic, &response_text)?;
        let kl_per_token: Vec<f64> = logprobs_rl
            .iter()
            .zip(&logprobs_sft)
            .map(|(rl, sft)| rl - sft)
            .collect();
        let mut shaped_rewards: Vec<f64> = kl_per_token.iter().map(|kl| -beta * kl).collect();
        *shaped_rewards.last_mut().expect("non-empty response") += reward.total;
        items.push(RolloutItem {
            prompt: prompt.clone(),
            prompt_ids,
            response_ids,
            response_text,
            logprobs_rl,
            logprobs_sft,
            reward,
            kl_per_token,
            shaped_rewards,
            advantages: Vec::new(),
        });
    }

    let returns: Vec<f64> = items
        .iter()
        .map(|it| it.shaped_rewards.iter().sum::<f64>())
        .collect();
    let whitened = whiten(&returns);
    for (item, &adv) in items.iter_mut().zip(&whitened) {
        item.advantages = vec![adv; item.response_ids.len()];
    }
    Ok(RolloutBatch { items })
}

/// Mean over the batch of the per-sequence KL estimate (sum of sampled
/// token log-ratios).
pub fn compute_sequence_kl(batch: &RolloutBatch) -> f64 {
    if batch.items.is_empty() {
        return 0.0;
    }
    batch
        .items
        .iter()
        .map(|it| it.kl_per_token.iter().sum::<f64>())
        .sum::<f64>()
        / batch.items.len() as f64
}

/// Mean per-token KL estimate over every token in the batch.
pub fn mean_per_token_kl(batch: &RolloutBatch) -> f64 {
    let total_tokens: usize = batch.items.iter().map(|it| it.kl_per_token.len()).sum();
    if total_tokens == 0 {
        return 0.0;
    }
    batch
        .items
        .iter()
        .flat_map(|it| it.kl_per_token.iter())
        .sum::<f64>()
        / total_tokens as f64
}

/// Exact per-position KL(pi_RL || pi_SFT) by summing over the full
/// vocabulary. Test oracle for the sampled estimator.
pub fn full_vocab_kl(
    model: &Seq2SeqModel,
    policy: &LoraAdapter,
    sft: &LoraAdapter,
    src_ids: &[u32],
    out_ids: &[u32],
) -> Result<Vec<f64>, PpoError> {
    let v = model.config.vocab_size;
    let rl = model.forward(src_ids, out_ids, Some(policy))?;
    let sf = model.forward(src_ids, out_ids, Some(sft))?;
    let rl_lp = log_softmax_raw(rl.data(), rl.shape(), 1);
    let sf_lp = log_softmax_raw(sf.data(), sf.shape(), 1);
    Ok((0..out_ids.len())
        .map(|t| {
            (0..v)
                .map(|j| {
                    let p = rl_lp[t * v + j].exp();
                    p * (rl_lp[t * v + j] - sf_lp[t * v + j])
                })
                .sum()
        })
        .collect())
}

/// Loss statistics from one [`ppo_update`].
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub surrogate_loss: f64,
    pub minibatches: usize,
    pub skipped_minibatches: usize,
}

/// Clipped-ratio PPO over the adapter parameters: maximize
/// `min(ratio * adv, clamp(ratio, 1-c, 1+c) * adv)` per token, for
/// `ppo_epochs` passes over shuffled mini-batches. Mini-batches with any
/// non-finite ratio are skipped and counted.
pub fn ppo_update(
    model: &Seq2SeqModel,
    policy: &mut LoraAdapter,
    adam: &mut AdamState,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
    batch_index: usize,
) -> Result<UpdateStats, PpoError> {
    let phase_seed = rng::derive_seed(cfg.seed, rng::stream::PHASE3);
    let mut stats = UpdateStats::default();
    let mut loss_sum = 0.0;

    for epoch in 0..cfg.ppo_epochs {
        let mut order: Vec<usize> = (0..batch.items.len()).collect();
        let mut shuffle_rng = rng::rng_from_seed(rng::derive_seed2(
            phase_seed,
            20_000 + batch_index as u64,
            epoch as u64,
        ));
        rng::shuffle(&mut shuffle_rng, &mut order);

        for chunk in order.chunks(cfg.mini_batch_size) {
            let total_tokens: usize = chunk
                .iter()
                .map(|&i| batch.items[i].response_ids.len())
                .sum();
            if total_tokens == 0 {
                continue;
            }
            policy.params.zero_grads();

            let mut minibatch_loss = 0.0;
            let mut finite = true;
            let mut pulls: Vec<(Tape, crate::model::ForwardOutput)> = Vec::new();
            for &i in chunk {
                let item = &batch.items[i];
                let mut tape = Tape::new();
                let out = forward_on_tape(
                    &mut tape,
                    model,
                    Some(policy),
                    &item.prompt_ids,
                    &item.response_ids,
                    None,
                )?;
                let logsm = tape.log_softmax(out.logits, 1)?;
                let lp_new = tape.gather_rows(logsm, &item.response_ids)?;
                let t = item.response_ids.len();
                let lp_old = tape.leaf_owned(
                    Tensor::new(vec![t], item.logprobs_rl.clone()).expect("lp_old"),
                );
                let adv = tape.leaf_owned(
                    Tensor::new(vec![t], item.advantages.clone()).expect("advantages"),
                );
                let diff = tape.sub(lp_new, lp_old)?;
                let ratio = tape.exp(diff);
                if tape.value(ratio).iter().any(|v| !v.is_finite()) {
                    finite = false;
                    break;
                }
                let clipped = tape.clamp(ratio, 1.0 - cfg.cliprange, 1.0 + cfg.cliprange);
                let t1 = tape.mul(ratio, adv)?;
                let t2 = tape.mul(clipped, adv)?;
                let per_token = tape.minimum(t1, t2)?;
                // Sum over this item's tokens, normalized by the
                // mini-batch token count; negated to make it a loss.
                let item_mean = tape.mean_all(per_token);
                let loss = tape.scale(item_mean, -(t as f64) / total_tokens as f64);
                minibatch_loss += tape.scalar_value(loss);
                tape.backward(loss)?;
                pulls.push((tape, out));
            }

            if !finite {
                stats.skipped_minibatches += 1;
                log::warn!("skipping mini-batch with non-finite ratio (batch {batch_index})");
                continue;
            }
            for (tape, out) in &pulls {
                for (name, node) in &out.adapter_nodes {
                    if let Some(g) = tape.grad(*node) {
                        policy.params.accumulate_grad(name, g, 1.0);
                    }
                }
            }
            adam.step(&mut policy.params, cfg.learning_rate, None);
            loss_sum += minibatch_loss;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        stats.surrogate_loss = loss_sum / stats.minibatches as f64;
    }
    Ok(stats)
}

/// Feedback update of the KL coefficient:
/// `e = clamp((observed - target)/target, -0.2, 0.2)`,
/// `beta' = beta * (1 + e * batch_size / horizon)`.
pub fn adaptive_kl_update(
    beta: f64,
    observed_kl: f64,
    target: f64,
    cfg: &PPOConfig,
) -> Result<f64, PpoError> {
    if target <= 0.0 {
        return Err(PpoError::BadConfig(format!(
            "adaptive KL target {target} must be positive"
        )));
    }
    let e = ((observed_kl - target) / target).clamp(-0.2, 0.2);
    Ok(beta * (1.0 + e * cfg.batch_size as f64 / cfg.horizon))
}

/// Full phase-3 outcome: the trained policy adapter plus per-batch traces.
#[derive(Debug, Clone)]
pub struct Phase3Outcome {
    pub reward_curve: Vec<f64>,
    pub kl_curve: Vec<f64>,
    pub beta_curve: Vec<f64>,
    pub batches_run: usize,
    pub final_checkpoint: PathBuf,
}

/// The rollout -> reward -> update -> adaptive-beta loop. `prompts` is the
/// prompt pool (already instruction-rendered); each batch samples
/// `batch_size` of them uniformly with replacement.
pub fn train_phase3(
    model: &Seq2SeqModel,
    sft_adapter: &LoraAdapter,
    prompts: &[RolloutPrompt],
    reward_fn: &dyn RewardFn,
    cfg: &PPOConfig,
) -> Result<(LoraAdapter, Phase3Outcome), PpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(PpoError::BadConfig("prompt pool is empty".into()));
    }
    if !model.params.all_frozen() {
        return Err(PpoError::UnfrozenBase);
    }
    sft_adapter.validate_for(model)?;

    let mut policy = sft_adapter.clone();
    let mut adam = AdamState::new();
    let mut beta = cfg.init_kl_coeff;
    let phase_seed = rng::derive_seed(cfg.seed, rng::stream::PHASE3);
    let dir = cfg.checkpoint_dir.join("phase3");
    std::fs::create_dir_all(&dir).map_err(|e| {
        PpoError::Train(TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })
    })?;
    let metrics_path = cfg
        .metrics_dir
        .clone()
        .unwrap_or_else(|| cfg.checkpoint_dir.clone())
        .join("phase3_metrics.csv");
    let mut metrics = PpoMetrics::create(&metrics_path)?;

    let mut outcome = Phase3Outcome {
        reward_curve: Vec::new(),
        kl_curve: Vec::new(),
        beta_curve: Vec::new(),
        batches_run: 0,
        final_checkpoint: dir.join("policy.ckpt"),
    };

    let base_hash = model.params.content_hash();
    for batch_index in 0..cfg.total_steps {
        let at = |e: PpoError| PpoError::AtBatch {
            batch: batch_index,
            source: Box::new(e),
        };
        let mut pick_rng =
            rng::rng_from_seed(rng::derive_seed2(phase_seed, 30_000, batch_index as u64));
        let batch_prompts: Vec<RolloutPrompt> = (0..cfg.batch_size)
            .map(|_| prompts[rng::rand_index(&mut pick_rng, prompts.len())].clone())
            .collect();

        let batch = generate_rollouts(
            model,
            &policy,
            sft_adapter,
            &batch_prompts,
            reward_fn,
            beta,
            cfg,
            batch_index,
        )
        .map_err(at)?;
        let kl = compute_sequence_kl(&batch);
        let stats = ppo_update(model, &mut policy, &mut adam, &batch, cfg, batch_index)
            .map_err(|e| PpoError::AtBatch {
                batch: batch_index,
                source: Box::new(e),
            })?;
        beta = adaptive_kl_update(beta, kl, cfg.adaptive_target, cfg)?;

        let n = batch.items.len() as f64;
        let mean = |f: fn(&RolloutItem) -> f64| batch.items.iter().map(f).sum::<f64>() / n;
        let mean_reward = mean(|it| it.reward.total);
        metrics.log(
            batch_index,
            mean_reward,
            mean(|it| it.reward.pc_raw),
            mean(|it| it.reward.aq_raw),
            mean(|it| it.reward.tox_raw),
            kl,
            beta,
            stats.surrogate_loss,
        )?;
        outcome.reward_curve.push(mean_reward);
        outcome.kl_curve.push(kl);
        outcome.beta_curve.push(beta);
        outcome.batches_run += 1;

        debug_assert_eq!(model.params.content_hash(), base_hash);
        if (batch_index + 1) % cfg.checkpoint_every == 0 {
            policy
                .save_as(&dir.join(format!("batch_{batch_index}.ckpt")), "ppo-policy")
                .map_err(|e| at(e.into()))?;
        }
        if let Some(thresh) = cfg.per_token_kl_stop {
            if mean_per_token_kl(&batch) > thresh {
                log::info!("early stop at batch {batch_index}: per-token KL exceeded {thresh}");
                break;
            }
        }
    }

    if model.params.content_hash() != base_hash {
        return Err(PpoError::UnfrozenBase);
    }
    metrics.flush()?;
    policy.save_as(&outcome.final_checkpoint, "ppo-policy")?;
    Ok((policy, outcome))
}

/// Phase-3 metrics CSV:
/// `batch,mean_reward,pc_mean,aq_mean,tox_mean,kl,beta,surrogate_loss`.
struct PpoMetrics {
    inner: MetricsLog,
}

impl PpoMetrics {
    fn create(path: &std::path::Path) -> Result<Self, PpoError> {
        Ok(PpoMetrics {
            inner: MetricsLog::create_with_header(
                path,
                "batch,mean_reward,pc_mean,aq_mean,tox_mean,kl,beta,surrogate_loss",
            )?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &mut self,
        batch: usize,
        mean_reward: f64,
        pc: f64,
        aq: f64,
        tox: f64,
        kl: f64,
        beta: f64,
        surrogate: f64,
    ) -> Result<(), PpoError> {
        self.inner
            .raw_line(&format!(
                "{batch},{mean_reward},{pc},{aq},{tox},{kl},{beta},{surrogate}"
            ))
            .map_err(PpoError::Train)
    }

    fn flush(&mut self) -> Result<(), PpoError> {
        self.inner.flush().map_err(PpoError::Train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach, LoraConfig};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (Seq2SeqModel, LoraAdapter) {
        let mut model = Seq2SeqModel::init(
            ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 32,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let mut adapter = attach(
            &mut model,
            LoraConfig {
                rank: 4,
                alpha: 8.0,
                dropout: 0.0,
                targets: Default::default(),
            },
            9,
        )
        .unwrap();
        // Nonzero adapter so policy != base behavior is possible later.
        let mut r = rng::rng_from_seed(5);
        for (_, p) in adapter.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng::uniform(&mut r, -0.02, 0.02);
            }
        }
        (model, adapter)
    }

    /// Constant reward with total exactly `self.0` (each component pinned
    /// to the same normalized value).
    struct FixedReward(f64);
    impl RewardFn for FixedReward {
        fn reward(&self, _t: &str, _r: &str) -> Result<RewardBreakdown, RewardError> {
            Ok(RewardBreakdown::from_raw(
                1.0 - 2.0 * self.0,
                self.0,
                1.0 - self.0,
            ))
        }
    }

    fn small_cfg(dir: &std::path::Path) -> PPOConfig {
        PPOConfig {
            batch_size: 4,
            mini_batch_size: 2,
            total_steps: 2,
            ppo_epochs: 1,
            max_new_tokens: 6,
            learning_rate: 1e-3,
            checkpoint_every: 100,
            seed: 11,
            checkpoint_dir: dir.to_path_buf(),
            ..PPOConfig::default()
        }
    }

    #[test]
    fn identical_policies_have_zero_kl_and_raw_shaping() {
        let (model, adapter) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let prompts: Vec<RolloutPrompt> =
            (0..4).map(|i| RolloutPrompt::new(format!("say {i}"))).collect();
        let batch = generate_rollouts(
            &model,
            &adapter,
            &adapter,
            &prompts,
            &FixedReward(0.7),
            0.5,
            &cfg,
            0,
        )
        .unwrap();
        for item in &batch.items {
            assert!(item.kl_per_token.iter().all(|&k| k == 0.0));
            // With zero KL the shaping reduces to the raw sequence reward
            // at the last token.
            let t = item.shaped_rewards.len();
            assert!(item.shaped_rewards[..t - 1].iter().all(|&r| r == 0.0));
            assert!((item.shaped_rewards[t - 1] - item.reward.total).abs() < 1e-15);
        }
        assert!(compute_sequence_kl(&batch).abs() <= 1e-12);
    }

    #[test]
    fn beta_zero_leaves_only_terminal_reward() {
        let (model, adapter) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let mut policy = adapter.clone();
        // Perturb the policy so KL is nonzero, then verify beta = 0 wipes it.
        let mut r = rng::rng_from_seed(6);
        for (_, p) in policy.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng::uniform(&mut r, -0.05, 0.05);
            }
        }
        let prompts = [RolloutPrompt::new("hello")];
        let batch = generate_rollouts(
            &model, &policy, &adapter, &prompts, &FixedReward(0.25), 0.0, &cfg, 0,
        )
        .unwrap();
        let item = &batch.items[0];
        assert!(item.kl_per_token.iter().any(|&k| k != 0.0));
        let t = item.shaped_rewards.len();
        assert!(item.shaped_rewards[..t - 1].iter().all(|&r| r == 0.0));
        assert!((item.shaped_rewards[t - 1] - item.reward.total).abs() < 1e-15);
    }

    #[test]
    fn whiten_is_zero_mean_unit_variance() {
        let mut r = rng::rng_from_seed(7);
        let xs: Vec<f64> = (0..64).map(|_| rng::uniform(&mut r, -3.0, 9.0)).collect();
        let w = whiten(&xs);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
        // Zero-variance input: centered, not divided.
        let flat = whiten(&[2.0, 2.0, 2.0]);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let (model, adapter) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let prompts: Vec<RolloutPrompt> =
            (0..4).map(|i| RolloutPrompt::new(format!("say {i}"))).collect();
        // Constant reward + identical policies -> all returns equal ->
        // whitened advantages exactly zero.
        let batch = generate_rollouts(
            &model,
            &adapter,
            &adapter,
            &prompts,
            &FixedReward(0.5),
            0.0,
            &cfg,
            0,
        )
        .unwrap();
        assert!(batch
            .items
            .iter()
            .all(|it| it.advantages.iter().all(|&a| a == 0.0)));
        let mut policy = adapter.clone();
        let before = policy.params.content_hash();
        let mut adam = AdamState::new();
        let stats = ppo_update(&model, &mut policy, &mut adam, &batch, &cfg, 0).unwrap();
        assert_eq!(policy.params.content_hash(), before);
        assert_eq!(stats.skipped_minibatches, 0);
        assert_eq!(stats.surrogate_loss, 0.0);
    }

    #[test]
    fn clip_formula_cases() {
        // For adv > 0 and ratio = 2 with c = 0.25 the clipped branch wins:
        // contribution = 1.25 * adv.
        let adv = 0.8;
        let ratio: f64 = 2.0;
        let c = 0.25;
        let contribution = (ratio * adv).min(ratio.clamp(1.0 - c, 1.0 + c) * adv);
        assert!((contribution - 1.25 * adv).abs() < 1e-15);

        // Ratio 1 everywhere: clipped equals unclipped.
        let r1: f64 = 1.0;
        assert_eq!(r1 * adv, r1.clamp(1.0 - c, 1.0 + c) * adv);

        // Clipped surrogate never exceeds unclipped, for either sign.
        let mut r = rng::rng_from_seed(8);
        for _ in 0..1000 {
            let ratio = rng::uniform(&mut r, 0.0, 3.0);
            let adv = rng::uniform(&mut r, -2.0, 2.0);
            let unclipped = ratio * adv;
            let surr = unclipped.min(ratio.clamp(1.0 - c, 1.0 + c) * adv);
            assert!(surr <= unclipped + 1e-15);
        }
    }

    #[test]
    fn sampled_estimator_expectation_matches_closed_form_kl() {
        // One-token vocab-3 toy policies: full enumeration of the sampled
        // estimator equals the closed-form KL.
        let p_rl: [f64; 3] = [0.6, 0.3, 0.1];
        let p_sft: [f64; 3] = [0.2, 0.5, 0.3];
        let estimate: f64 = p_rl
            .iter()
            .zip(&p_sft)
            .map(|(&p, &q)| p * (p.ln() - q.ln()))
            .sum();
        let closed_form: f64 = p_rl
            .iter()
            .zip(&p_sft)
            .map(|(&p, &q)| p * (p / q).ln())
            .sum();
        assert!((estimate - closed_form).abs() <= 1e-15);
        assert!(estimate > 0.0);
    }

    #[test]
    fn full_vocab_kl_is_nonnegative_and_zero_for_identical() {
        let (model, adapter) = tiny_setup();
        let src = [1, 2, 3];
        let out = [5, 6];
        let same = full_vocab_kl(&model, &adapter, &adapter, &src, &out).unwrap();
        assert!(same.iter().all(|&k| k.abs() <= 1e-12));

        let mut other = adapter.clone();
        let mut r = rng::rng_from_seed(9);
        for (_, p) in other.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng::uniform(&mut r, -0.05, 0.05);
            }
        }
        let diff = full_vocab_kl(&model, &other, &adapter, &src, &out).unwrap();
        assert!(diff.iter().all(|&k| k >= -1e-12));
        assert!(diff.iter().any(|&k| k > 0.0));
    }

    #[test]
    fn adaptive_kl_formula() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PPOConfig {
            batch_size: 32,
            horizon: 10000.0,
            checkpoint_dir: dir.path().to_path_buf(),
            ..PPOConfig::default()
        };
        let beta = 0.03;
        // On target: unchanged.
        assert_eq!(adaptive_kl_update(beta, 5.0, 5.0, &cfg).unwrap(), beta);
        // Far above: e clamps to 0.2, factor 1.00064.
        let up = adaptive_kl_update(beta, 500.0, 5.0, &cfg).unwrap();
        assert!((up - beta * 1.00064).abs() < 1e-15);
        // Zero observed: factor 1 - 0.2*32/10000.
        let down = adaptive_kl_update(beta, 0.0, 5.0, &cfg).unwrap();
        assert!((down - beta * (1.0 - 0.00064)).abs() < 1e-15);
        assert!(down > 0.0);
        // Bad target errors.
        assert!(adaptive_kl_update(beta, 1.0, 0.0, &cfg).is_err());
    }

    #[test]
    fn constant_reward_training_is_flat_and_finite() {
        let (model, adapter) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PPOConfig {
            total_steps: 3,
            ..small_cfg(dir.path())
        };
        let prompts: Vec<RolloutPrompt> =
            (0..4).map(|i| RolloutPrompt::new(format!("say {i}"))).collect();
        let (_policy, outcome) =
            train_phase3(&model, &adapter, &prompts, &FixedReward(0.5), &cfg).unwrap();
        assert_eq!(outcome.batches_run, 3);
        for r in &outcome.reward_curve {
            assert!((r - 0.5).abs() < 1e-12, "constant reward drifted: {r}");
        }
        assert!(outcome.kl_curve.iter().all(|k| k.is_finite()));
        assert!(outcome.beta_curve.iter().all(|&b| b > 0.0));
        assert!(outcome.final_checkpoint.exists());
        let metrics = std::fs::read_to_string(dir.path().join("phase3_metrics.csv")).unwrap();
        assert!(metrics.starts_with("batch,mean_reward,pc_mean,aq_mean,tox_mean,kl,beta,surrogate_loss"));
        assert_eq!(metrics.lines().count(), 4);
    }

    #[test]
    fn mini_batch_must_divide_batch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PPOConfig {
            batch_size: 5,
            mini_batch_size: 2,
            checkpoint_dir: dir.path().to_path_buf(),
            ..PPOConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PpoError::BadConfig(_))));
    }
}
