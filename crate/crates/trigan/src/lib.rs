//! Toolkit for rebalancing image datasets with a three-player generative
//! model (generator, discriminator, classifier) and for comparing it against
//! interpolation-based oversampling baselines.
//!
//! Everything is deterministic given a seed: computation is single-threaded
//! f64 throughout, and randomness comes from per-stage ChaCha streams.

pub mod baselines;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod manifest;
pub mod networks;
pub mod plot;
pub mod report;
pub mod seeds;
pub mod synth;
pub mod training;
