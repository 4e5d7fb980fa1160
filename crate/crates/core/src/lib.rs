//! Contactless risk monitoring over video-like frame streams.
//!
//! The crate is organized along the processing chain:
//!
//! - [`stream`]: manifest-backed and synthetic frame sources
//! - [`identity`]: face detection/embedding interfaces and nearest-identity matching
//! - [`scoring`]: per-face risk scorers, confusion metrics and ROC-AUC
//! - [`analytics`]: the append-only risk store, window descriptors, KL divergence
//!   and two-sample change detection
//! - [`records`]: subject profiles and report-context assembly
//! - [`agent`]: rule-based risk levels and natural-language report generation
//! - [`numerics`]: toy-scale ViT encoder, VQ tokenizer losses, masked modeling and Grad-CAM
//! - [`pipeline`] / [`profiling`]: the end-to-end monitoring loop and its stage timer

pub mod agent;
pub mod analytics;
pub mod error;
pub mod identity;
pub mod numerics;
pub mod pipeline;
pub mod profiling;
pub mod records;
pub mod scoring;
pub mod stream;

pub use error::{Error, Result};

/// Derive a child seed from a parent seed and a stream/subject key.
///
/// All randomness in a run flows from one configured seed; this fans it out
/// so that each stream or scorer owns an independent generator.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, mixed with the parent through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
