//! Deterministic derivation of independent RNG streams from a run seed.
//!
//! Every randomized stage (split shuffling, pretraining epochs, training
//! epochs, evaluation draws) gets its own stream keyed by (seed, stage tag,
//! index). Streams are stable across process runs and independent of
//! execution order, which is what makes runs resumable and bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags. Keep values stable; they are part of the reproducibility
/// contract between a checkpoint and the run that resumes it.
pub mod tag {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const OVERSAMPLE: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes (seed, stage, index) into one 64-bit stream key.
pub fn key(seed: u64, stage: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stage.rotate_left(24)) ^ index.rotate_left(48))
}

/// A fresh RNG for the given (seed, stage, index) triple.
pub fn stream(seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, stage, index))
}
