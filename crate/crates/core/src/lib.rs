//! Desk-scale counterspeech generation pipeline.
//!
//! The pipeline trains a tiny encoder-decoder transformer in three phases:
//!
//! 1. **Phase 1** — multi-task instruction tuning on seven hate-speech
//!    explanation tasks ([`train::train_phase1`]).
//! 2. **Phase 2** — LoRA adapter learning for intent-conditioned
//!    counterspeech on a frozen base ([`train::train_phase2`]).
//! 3. **Phase 3** — PPO against a composite stance/quality/toxicity reward
//!    with an adaptive KL penalty ([`ppo::train_phase3`]).
//!
//! Everything runs on 64-bit floats on one CPU core and is bit-reproducible
//! from a single seed. [`eval`] scores generations (ROUGE, METEOR-exact,
//! cosine similarity, category accuracy, toxicity) and renders a report.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod lora;
pub mod model;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod tensor;
pub mod train;
