//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate embedding: norm {norm} below threshold")]
    DegenerateEmbedding { norm: f64 },

    #[error("embeddings must be unit-norm (index {index}, norm {norm})")]
    NotUnitNorm { index: usize, norm: f64 },

    #[error("rotation requires square input, got {h}x{w}")]
    NonSquareRotation { h: usize, w: usize },

    #[error("cutpaste sampling failed after {attempts} attempts")]
    CutPasteSamplingFailed { attempts: usize },

    #[error("patch sampling failed: {reason}")]
    PatchSamplingFailed { reason: String },

    #[error("empty pool")]
    EmptyPool,

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k = {k} exceeds memory bank size {bank}")]
    KTooLarge { k: usize, bank: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("metric requires both classes present")]
    SingleClass,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
