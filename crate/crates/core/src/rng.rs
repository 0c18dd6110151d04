//! Seeded randomness helpers.
//!
//! One global seed fans out to per-phase and per-event streams through
//! [`derive_seed`], a splitmix64 mix of the parent seed and a stream tag.
//! Every stochastic component (init, shuffles, sampling, dropout) draws from
//! a `ChaCha8Rng` built from a derived seed, so any phase can be rerun in
//! isolation and reproduce bit-identical results.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags for the top-level phases.
pub mod stream {
    pub const PHASE1: u64 = 1;
    pub const PHASE2: u64 = 2;
    pub const PHASE3: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const LORA_INIT: u64 = 5;
    pub const GENERATE: u64 = 6;
}

/// splitmix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag))
}

/// Derive a child seed from a parent seed and two stream tags (e.g. epoch
/// and step indices).
pub fn derive_seed2(parent: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive_seed(derive_seed(parent, tag_a), tag_b)
}

/// Seeded generator for one stream.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform f64 in [0, 1) with 53-bit resolution.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform01(rng);
    // u1 == 0 would take ln(0); nudge into (0, 1].
    let u1 = if u1 <= 0.0 { f64::MIN_POSITIVE } else { u1 };
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Unbiased uniform index in [0, n) via rejection sampling.
pub fn rand_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "rand_index over empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rand_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Sample an index from unnormalized non-negative weights.
pub fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "sample_weighted with zero total mass");
    let mut dart = uniform01(rng) * total;
    for (i, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
