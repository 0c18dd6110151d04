//! Supervised training: phase 1 (multi-task instruction tuning) and
//! phase 2 (LoRA adapter learning on a frozen base), with Adam, gradient
//! clipping, per-step CSV metrics, and epoch-end checkpoints that resume
//! bit-exactly.
//!
//! Checkpoint layout under `checkpoint_dir`:
//!
//! ```text
//! phase1/epoch_N.ckpt   full trainer state (weights + Adam + epoch)
//! phase1/theta_m.ckpt   final phase-1 weights, kind "model"
//! phase2/epoch_N.ckpt   adapter trainer state
//! phase2/adapter.ckpt   final adapter, kind "lora"
//! best/phase1.ckpt      symlink to the best-dev-loss epoch (when dev given)
//! best/phase2.ckpt      likewise
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{
    build_multitask_mixture, tokenize, CSRecord, DataError, ExplanationRecord,
    MixtureWeighting, PromptSample, TaskId, TemplateSet, EOS,
};
use crate::lora::{LoraAdapter, LoraConfig, LoraError};
use crate::model::{forward_on_tape, ModelConfig, ModelError, ParamStore, Seq2SeqModel};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss {value} at step {step}; aborting")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("phase 2 requires a fully frozen base model")]
    UnfrozenBase,
    #[error("phase 1 requires an unfrozen model")]
    FrozenModel,
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("base model changed during phase 2 (epoch {epoch}); aborting")]
    BaseDrift { epoch: usize },
    #[error("bad trainer state: {0}")]
    BadState(String),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-phase training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_input_tokens: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Phase-1 task weighting knob.
    pub mixture: MixtureWeighting,
    /// Metrics CSV directory; defaults to `checkpoint_dir`.
    pub metrics_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

impl TrainConfig {
    /// Phase-1 defaults: lr 1e-4, batch 8, 3 epochs.
    pub fn phase1() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 3,
            max_input_tokens: 256,
            grad_clip_norm: Some(1.0),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            max_steps: None,
            mixture: MixtureWeighting::default(),
            metrics_dir: None,
        }
    }

    /// Phase-2 defaults: lr 4e-6, batch 8, 16 epochs.
    pub fn phase2() -> Self {
        TrainConfig {
            learning_rate: 4e-6,
            epochs: 16,
            ..Self::phase1()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 && self.learning_rate != 0.0 {
            return Err(TrainError::BadState(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadState("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn metrics_path(&self, file: &str) -> PathBuf {
        self.metrics_dir
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.clone())
            .join(file)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam with optional global-norm gradient clipping.
/// Frozen parameters carry no state and receive no updates.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Norms observed during one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct AdamStepStats {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter in the store.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        lr: f64,
        clip_norm: Option<f64>,
    ) -> AdamStepStats {
        self.step += 1;
        let t = self.step;

        let mut sq_sum = 0.0;
        for (_, p) in params.iter() {
            if p.frozen {
                continue;
            }
            sq_sum += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
        let grad_norm = sq_sum.sqrt();
        let scale = match clip_norm {
            Some(c) if grad_norm > c && grad_norm > 0.0 => c / grad_norm,
            _ => 1.0,
        };
        let applied_norm = grad_norm * scale;

        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let n = p.grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.value.data_mut();
            for i in 0..n {
                let g = p.grad[i] * scale;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        AdamStepStats {
            grad_norm,
            applied_norm,
        }
    }

    /// Moment tensors for checkpointing, keyed `adam.m.<name>` / `adam.v.<name>`.
    fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.m {
            out.insert(
                format!("adam.m.{name}"),
                Tensor::new(vec![m.len()], m.clone()).expect("adam m"),
            );
        }
        for (name, v) in &self.v {
            out.insert(
                format!("adam.v.{name}"),
                Tensor::new(vec![v.len()], v.clone()).expect("adam v"),
            );
        }
        out
    }

    fn from_tensors(tensors: &BTreeMap<String, Tensor>, step: u64) -> Self {
        let mut state = AdamState {
            step,
            ..Default::default()
        };
        for (name, t) in tensors {
            if let Some(pname) = name.strip_prefix("adam.m.") {
                state.m.insert(pname.to_string(), t.data().to_vec());
            } else if let Some(pname) = name.strip_prefix("adam.v.") {
                state.v.insert(pname.to_string(), t.data().to_vec());
            }
        }
        state
    }
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

/// Append-only CSV: `step,tag,loss,lr,grad_norm`. The tag is a task id
/// (I1..I8), a phase name, "total", or "dev".
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        Self::create_with_header(path, "step,tag,loss,lr,grad_norm")
    }

    pub fn create_with_header(path: &Path, header: &str) -> Result<Self, TrainError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
            }
        }
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{header}").map_err(|e| io_err(path, e))?;
        Ok(MetricsLog {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn raw_line(&mut self, line: &str) -> Result<(), TrainError> {
        writeln!(self.out, "{line}").map_err(|e| io_err(&self.path, e))?;
        Ok(())
    }

    pub fn log(
        &mut self,
        step: usize,
        tag: &str,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    ) -> Result<(), TrainError> {
        writeln!(self.out, "{step},{tag},{loss},{lr},{grad_norm}")
            .map_err(|e| io_err(&self.path, e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

// ---------------------------------------------------------------------------
// Shared batch machinery
// ---------------------------------------------------------------------------

/// One tokenized training pair.
struct Example {
    tag: TaskId,
    src: Vec<u32>,
    tgt: Vec<u32>,
}

fn to_example(sample: &PromptSample, max_input_tokens: usize, max_seq_len: usize) -> Example {
    let src = tokenize(&sample.prompt, max_input_tokens.min(max_seq_len)).ids;
    let mut tgt = tokenize(&sample.target, max_seq_len - 1).ids;
    tgt.push(EOS);
    Example {
        tag: sample.task,
        src,
        tgt,
    }
}

/// Forward, loss, backward for one example. The returned tape and node map
/// let the caller pull gradients once the model borrow has ended.
fn train_example(
    model: &Seq2SeqModel,
    adapter: Option<&LoraAdapter>,
    example: &Example,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(f64, Tape, crate::model::ForwardOutput), TrainError> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, model, adapter, &example.src, &example.tgt, dropout_rng)?;
    let loss = tape.cross_entropy(out.logits, &example.tgt, None)?;
    let loss_value = tape.scalar_value(loss);
    tape.backward(loss)?;
    Ok((loss_value, tape, out))
}

/// Mean loss over a fixed set of examples, no gradients.
fn eval_loss(
    model: &Seq2SeqModel,
    adapter: Option<&LoraAdapter>,
    examples: &[Example],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, model, adapter, &ex.src, &ex.tgt, None)?;
        let loss = tape.cross_entropy(out.logits, &ex.tgt, None)?;
        total += tape.scalar_value(loss);
    }
    Ok(total / examples.len() as f64)
}

fn best_symlink(dir: &Path, name: &str, target: &Path) -> Result<(), TrainError> {
    let best_dir = dir.join("best");
    std::fs::create_dir_all(&best_dir).map_err(|e| io_err(&best_dir, e))?;
    let link = best_dir.join(name);
    if link.exists() || link.symlink_metadata().is_ok() {
        std::fs::remove_file(&link).ok();
    }
    let rel = PathBuf::from("..").join(target.strip_prefix(dir).unwrap_or(target));
    #[cfg(unix)]
    std::os::unix::fs::symlink(&rel, &link).map_err(|e| io_err(&link, e))?;
    #[cfg(not(unix))]
    std::fs::copy(target, &link).map(|_| ()).map_err(|e| io_err(&link, e))?;
    Ok(())
}

/// Per-phase result: loss curve and where the final checkpoint landed.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    /// Mean batch loss per optimizer step.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub final_checkpoint: PathBuf,
}

// ---------------------------------------------------------------------------
// Phase 1
// ---------------------------------------------------------------------------

/// Multi-task instruction tuning over the seven explanation tasks.
/// Emits per-task and total loss per step, checkpoints at every epoch end,
/// and writes the final weights as `phase1/theta_m.ckpt`.
pub fn train_phase1(
    model: &mut Seq2SeqModel,
    explanations: &[ExplanationRecord],
    dev: Option<&[ExplanationRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome, TrainError> {
    let mut adam = AdamState::new();
    phase1_loop(model, &mut adam, 0, explanations, dev, templates, cfg)
}

/// Continue phase 1 from an epoch-end checkpoint.
pub fn resume_phase1(
    ckpt: &Path,
    explanations: &[ExplanationRecord],
    dev: Option<&[ExplanationRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<(Seq2SeqModel, PhaseOutcome), TrainError> {
    let ck = checkpoint::load_checkpoint(ckpt)?;
    if ck.kind != "phase1-train" {
        return Err(TrainError::BadState(format!(
            "expected a phase1-train checkpoint, found {:?}",
            ck.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| TrainError::BadState(format!("model config: {e}")))?;
    let epoch_done = ck.extras["epoch"]
        .as_u64()
        .ok_or_else(|| TrainError::BadState("missing epoch".into()))? as usize;
    let adam_step = ck.extras["adam_step"]
        .as_u64()
        .ok_or_else(|| TrainError::BadState("missing adam_step".into()))?;
    let mut adam = AdamState::from_tensors(&ck.tensors, adam_step);
    let params: BTreeMap<String, Tensor> = ck
        .tensors
        .into_iter()
        .filter(|(k, _)| !k.starts_with("adam."))
        .collect();
    let mut model = Seq2SeqModel {
        config,
        params: ParamStore::from_tensors(params),
    };
    let outcome = phase1_loop(
        &mut model,
        &mut adam,
        epoch_done + 1,
        explanations,
        dev,
        templates,
        cfg,
    )?;
    Ok((model, outcome))
}

fn phase1_loop(
    model: &mut Seq2SeqModel,
    adam: &mut AdamState,
    start_epoch: usize,
    explanations: &[ExplanationRecord],
    dev: Option<&[ExplanationRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome, TrainError> {
    cfg.validate()?;
    if explanations.is_empty() {
        return Err(TrainError::EmptyDataset("explanation"));
    }
    if model.params.all_frozen() {
        return Err(TrainError::FrozenModel);
    }
    let phase_seed = rng::derive_seed(cfg.seed, rng::stream::PHASE1);
    let dir = cfg.checkpoint_dir.join("phase1");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut metrics = MetricsLog::create(&cfg.metrics_path("phase1_metrics.csv"))?;

    let dev_examples: Option<Vec<Example>> = match dev {
        Some(recs) if !recs.is_empty() => {
            let mix = build_multitask_mixture(
                recs,
                templates,
                MixtureWeighting::Proportional,
                rng::derive_seed(phase_seed, u64::MAX),
            )?;
            Some(
                mix.iter()
                    .map(|s| to_example(s, cfg.max_input_tokens, model.config.max_seq_len))
                    .collect(),
            )
        }
        _ => None,
    };

    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut best_dev = f64::INFINITY;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in start_epoch..cfg.epochs {
        let mixture = build_multitask_mixture(
            explanations,
            templates,
            cfg.mixture,
            rng::derive_seed2(phase_seed, 1, epoch as u64),
        )?;
        let examples: Vec<Example> = mixture
            .iter()
            .map(|s| to_example(s, cfg.max_input_tokens, model.config.max_seq_len))
            .collect();

        for batch in examples.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            model.params.zero_grads();
            let weight = 1.0 / batch.len() as f64;
            let mut by_task: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
            let mut total = 0.0;
            for ex in batch {
                let (loss, tape, out) = train_example(model, None, ex, None)?;
                for (name, node) in &out.base_nodes {
                    if let Some(g) = tape.grad(*node) {
                        model.params.accumulate_grad(name, g, weight);
                    }
                }
                total += loss;
                let e = by_task.entry(ex.tag).or_insert((0.0, 0));
                e.0 += loss;
                e.1 += 1;
            }
            let mean = total / batch.len() as f64;
            if !mean.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    value: mean,
                });
            }
            let stats = adam.step(&mut model.params, cfg.learning_rate, cfg.grad_clip_norm);
            for (task, (sum, count)) in &by_task {
                metrics.log(
                    step,
                    task.name(),
                    sum / *count as f64,
                    cfg.learning_rate,
                    stats.applied_norm,
                )?;
            }
            metrics.log(step, "total", mean, cfg.learning_rate, stats.applied_norm)?;
            curve.push(mean);
            step += 1;
        }

        // Epoch-end checkpoint with full trainer state.
        let mut tensors = model.params.to_tensors();
        tensors.extend(adam.to_tensors());
        let mut extras = BTreeMap::new();
        extras.insert("epoch".to_string(), serde_json::json!(epoch));
        extras.insert("adam_step".to_string(), serde_json::json!(adam.step_count()));
        let epoch_path = dir.join(format!("epoch_{epoch}.ckpt"));
        checkpoint::save_checkpoint(
            &epoch_path,
            "phase1-train",
            serde_json::to_value(&model.config).expect("config"),
            extras,
            &tensors,
        )?;

        if let Some(devs) = &dev_examples {
            let dev_loss = eval_loss(model, None, devs)?;
            metrics.log(step, "dev", dev_loss, cfg.learning_rate, 0.0)?;
            if dev_loss < best_dev {
                best_dev = dev_loss;
                best_symlink(&cfg.checkpoint_dir, "phase1.ckpt", &epoch_path)?;
            }
        }
    }

    metrics.flush()?;
    let final_path = dir.join("theta_m.ckpt");
    model.save(&final_path, "model")?;
    Ok(PhaseOutcome {
        loss_curve: curve,
        steps: step,
        final_checkpoint: final_path,
    })
}

// ---------------------------------------------------------------------------
// Phase 2
// ---------------------------------------------------------------------------

/// LoRA fine-tuning on intent-conditioned counterspeech pairs. The base
/// stays bit-frozen (hash-checked every epoch); only A/B receive updates.
pub fn train_phase2(
    model: &Seq2SeqModel,
    adapter: &mut LoraAdapter,
    dataset: &[CSRecord],
    dev: Option<&[CSRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome, TrainError> {
    let mut adam = AdamState::new();
    phase2_loop(model, adapter, &mut adam, 0, dataset, dev, templates, cfg)
}

/// Continue phase 2 from an epoch-end checkpoint: restores the adapter and
/// optimizer, then keeps training against the same frozen base.
pub fn resume_phase2(
    ckpt: &Path,
    model: &Seq2SeqModel,
    dataset: &[CSRecord],
    dev: Option<&[CSRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, PhaseOutcome), TrainError> {
    let ck = checkpoint::load_checkpoint(ckpt)?;
    if ck.kind != "phase2-train" {
        return Err(TrainError::BadState(format!(
            "expected a phase2-train checkpoint, found {:?}",
            ck.kind
        )));
    }
    let lora_config: LoraConfig = serde_json::from_value(ck.config["lora"].clone())
        .map_err(|e| TrainError::BadState(format!("lora config: {e}")))?;
    let sites: Vec<String> = serde_json::from_value(ck.config["sites"].clone())
        .map_err(|e| TrainError::BadState(format!("sites: {e}")))?;
    let base_d_model = ck.config["base_d_model"]
        .as_u64()
        .ok_or_else(|| TrainError::BadState("missing base_d_model".into()))? as usize;
    let epoch_done = ck.extras["epoch"]
        .as_u64()
        .ok_or_else(|| TrainError::BadState("missing epoch".into()))? as usize;
    let adam_step = ck.extras["adam_step"]
        .as_u64()
        .ok_or_else(|| TrainError::BadState("missing adam_step".into()))?;
    let mut adam = AdamState::from_tensors(&ck.tensors, adam_step);
    let params: BTreeMap<String, Tensor> = ck
        .tensors
        .into_iter()
        .filter(|(k, _)| !k.starts_with("adam."))
        .collect();
    let mut adapter = LoraAdapter::from_parts(lora_config, base_d_model, params, sites);
    adapter.validate_for(model)?;
    let outcome = phase2_loop(
        model,
        &mut adapter,
        &mut adam,
        epoch_done + 1,
        dataset,
        dev,
        templates,
        cfg,
    )?;
    Ok((adapter, outcome))
}

#[allow(clippy::too_many_arguments)]
fn phase2_loop(
    model: &Seq2SeqModel,
    adapter: &mut LoraAdapter,
    adam: &mut AdamState,
    start_epoch: usize,
    dataset: &[CSRecord],
    dev: Option<&[CSRecord]>,
    templates: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("counterspeech"));
    }
    if !model.params.all_frozen() {
        return Err(TrainError::UnfrozenBase);
    }
    adapter.validate_for(model)?;
    let base_hash = model.params.content_hash();
    let phase_seed = rng::derive_seed(cfg.seed, rng::stream::PHASE2);
    let dir = cfg.checkpoint_dir.join("phase2");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut metrics = MetricsLog::create(&cfg.metrics_path("phase2_metrics.csv"))?;

    let to_pair = |r: &CSRecord| -> Result<Example, TrainError> {
        let prompt = templates.render(TaskId::I8, &r.hate_speech, Some(r.intent))?;
        Ok(to_example(
            &PromptSample {
                task: TaskId::I8,
                prompt,
                target: r.counterspeech.clone(),
            },
            cfg.max_input_tokens,
            model.config.max_seq_len,
        ))
    };
    let examples: Vec<Example> = dataset.iter().map(to_pair).collect::<Result<_, _>>()?;
    let dev_examples: Option<Vec<Example>> = match dev {
        Some(recs) if !recs.is_empty() => {
            Some(recs.iter().map(to_pair).collect::<Result<_, _>>()?)
        }
        _ => None,
    };

    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut best_dev = f64::INFINITY;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = rng::rng_from_seed(rng::derive_seed2(phase_seed, 1, epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut dropout_rng = rng::rng_from_seed(rng::derive_seed2(phase_seed, 2, epoch as u64));

        for batch in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            adapter.params.zero_grads();
            let weight = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for &i in batch {
                let (loss, tape, out) =
                    train_example(model, Some(adapter), &examples[i], Some(&mut dropout_rng))?;
                for (name, node) in &out.adapter_nodes {
                    if let Some(g) = tape.grad(*node) {
                        adapter.params.accumulate_grad(name, g, weight);
                    }
                }
                total += loss;
            }
            let mean = total / batch.len() as f64;
            if !mean.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, value: mean });
            }
            let stats = adam.step(&mut adapter.params, cfg.learning_rate, cfg.grad_clip_norm);
            metrics.log(step, "phase2", mean, cfg.learning_rate, stats.applied_norm)?;
            curve.push(mean);
            step += 1;
        }

        if model.params.content_hash() != base_hash {
            return Err(TrainError::BaseDrift { epoch });
        }

        let mut tensors = adapter.params.to_tensors();
        tensors.extend(adam.to_tensors());
        let mut extras = BTreeMap::new();
        extras.insert("epoch".to_string(), serde_json::json!(epoch));
        extras.insert("adam_step".to_string(), serde_json::json!(adam.step_count()));
        let header = serde_json::json!({
            "lora": adapter.config,
            "base_d_model": adapter.base_d_model,
            "sites": adapter.sites(),
        });
        let epoch_path = dir.join(format!("epoch_{epoch}.ckpt"));
        checkpoint::save_checkpoint(&epoch_path, "phase2-train", header, extras, &tensors)?;

        if let Some(devs) = &dev_examples {
            let dev_loss = eval_loss(model, Some(adapter), devs)?;
            metrics.log(step, "dev", dev_loss, cfg.learning_rate, 0.0)?;
            if dev_loss < best_dev {
                best_dev = dev_loss;
                best_symlink(&cfg.checkpoint_dir, "phase2.ckpt", &epoch_path)?;
            }
        }
    }

    metrics.flush()?;
    let final_path = dir.join("adapter.ckpt");
    adapter.save(&final_path)?;
    Ok(PhaseOutcome {
        loss_curve: curve,
        steps: step,
        final_checkpoint: final_path,
    })
}
