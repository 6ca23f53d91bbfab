//! Contrastive representation learning for one-class anomaly detection.
//!
//! The crate covers the full training-to-scoring path at desk scale:
//!
//! - [`batch`] — multiview batches, label conventions, and the positive-set
//!   policies that distinguish NT-Xent, SupCon, Rot-SupCon, and FIRM.
//! - [`losses`] — the temperature-scaled contrastive objectives with analytic
//!   gradients over projection-space embeddings.
//! - [`synth`] — synthetic outlier generators (rotations, cut-paste, Perlin
//!   masks, external pools).
//! - [`patch`] — foreground masks, foreground-aware patch-pair sampling, and
//!   dense patch grids for inference.
//! - [`encoder`] — a small differentiable encoder + projection head with an
//!   SGD/momentum training loop (linear warmup, cosine annealing).
//! - [`scoring`] — memory-bank detection scores (cosine-kNN and variants,
//!   prototype, KDE) plus patch-level image scoring and localization maps.
//! - [`metrics`] — AUROC and area-under-learning-curve.
//!
//! All numeric code is generic over the scalar type via [`Scalar`] (f32 or
//! f64); concrete aliases for the common instantiations live at the crate
//! root. Every operation that draws randomness takes an explicit seeded
//! generator, so results are reproducible bit-for-bit.

pub mod batch;
pub mod encoder;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod patch;
pub mod scalar;
pub mod scoring;
pub mod synth;

pub use batch::{Embedding, LabeledSample, MultiviewBatch, PositiveSetPolicy};
pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use scalar::Scalar;

/// Label value reserved for in-distribution (normal) samples.
pub const INLIER_LABEL: u32 = 1;

/// Default group tag for synthetic outliers without a finer label structure
/// (external pools, cut-paste, injected anomalies).
pub const OUTLIER_LABEL: u32 = 2;

// Concrete instantiations used by the training/scoring harness.
pub type ImageF32 = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type BatchF32 = MultiviewBatch<f32>;
pub type EncoderStateF32 = encoder::EncoderState<f32>;
pub type EncoderStateF64 = encoder::EncoderState<f64>;
pub type MemoryBankF32 = scoring::MemoryBank<f32>;
pub type MemoryBankF64 = scoring::MemoryBank<f64>;
