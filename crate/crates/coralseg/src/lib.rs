//! Semi-supervised segmentation at desk scale.
//!
//! Two small convolutional branches cross-teach each other on a synthetic 2D
//! segmentation task: each branch trains on the other's argmax pseudo-labels,
//! and an optional consistency term aligns the two branches' similarity
//! structure against anchor embeddings drawn from labeled data. The anchor
//! store is a dynamic feature pool with confidence filtering and momentum
//! fusion; the similarity measure is either a CORAL distance on second-order
//! statistics or plain cosine similarity.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — dense matrix primitives (centering, covariance, softmax,
//!   cross-entropy) everything else builds on
//! - [`coral`] — CORAL distances, the pairwise correlation matrix, and the
//!   cross-branch consistency loss
//! - [`losses`] — supervised / cross-pseudo-supervision losses and the
//!   Gaussian ramp-up schedule for the unsupervised weights
//! - [`pool`] — the dynamic feature pool and both sampling strategies
//! - [`model`] — the dual-branch network with analytic reverse-mode gradients
//!   and SGD with momentum
//! - [`data`] — synthetic dataset generator, labeled/unlabeled split, crops,
//!   PGM + manifest I/O
//! - [`metrics`] — Dice, Jaccard, 95th-percentile Hausdorff, average surface
//!   distance
//! - [`config`] / [`trainer`] — run configuration and the training, eval, and
//!   ablation drivers behind the CLI

pub mod config;
pub mod coral;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pool;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("degenerate per-vector covariance: dim must be >= 2, got {0}")]
    DegenerateVector(usize),
    #[error("supervised loss requires ground truth")]
    MissingLabels,
    #[error("pool underfilled: class {0} has no filled slots")]
    PoolUnderfilled(usize),
    #[error("branches must be independently initialized (equal seeds)")]
    EqualSeeds,
    #[error("stale cache: forward output does not match current state")]
    StaleCache,
    #[error("diverged: non-finite value in {0}")]
    Diverged(String),
    #[error("no surface: mask is empty")]
    EmptySurface,
    #[error("bad file format: {0}")]
    BadFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives a named RNG sub-seed from a master seed.
///
/// Every randomized stage (dataset, split, model init, crops, pool) draws its
/// own stream so that changing one stage's consumption pattern cannot shift
/// another's.
pub fn subseed(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then one splitmix64 round to mix in the master.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
