//! Multi-task learning engine for many simultaneous classification tasks.
//!
//! A shared multimodal transformer backbone feeds one lightweight
//! classification head per task. Training draws every batch from a single
//! task, choosing tasks with a size-interpolated distribution whose exponent
//! decays over training, and head widths can be allocated per task by
//! complexity quartile.
//!
//! Module map:
//!
//! - [`ndcore`]: tensors, a reverse-mode tape, AdamW.
//! - [`datagen`]: synthetic correlated task collections, splits, dataset files.
//! - [`sampler`]: task distributions and exponent decay schedules.
//! - [`heads`]: FC and low-dimension attention heads, parameter accounting.
//! - [`dypa`]: quartile-based head width allocation.
//! - [`backbone`]: input assembly and the shared encoder.
//! - [`trainer`]: learning-rate policies, the training loop, checkpoints.
//! - [`evalsuite`]: mean/T10/B10 accuracy reports and comparisons.

pub mod backbone;
pub mod datagen;
pub mod dypa;
pub mod error;
pub mod evalsuite;
pub mod heads;
pub mod ndcore;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Derive an independent 64-bit seed from a base seed and a stream label.
///
/// SplitMix64 finalizer over the combined inputs; used wherever a
/// per-task or per-parameter RNG stream must not depend on iteration order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, for turning names into RNG streams.
pub fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
