//! Experiment harness: dataset ingestion, outlier generation wiring, the
//! end-to-end training/scoring pipeline, and file formats (PNG, 16-bit PGM
//! heatmaps, CSV, SVG plots).
//!
//! The `firm` binary exposes this as subcommands; see the crate README.

pub mod augment;
pub mod dataset;
pub mod experiment;
pub mod io;
pub mod svg;
pub mod toy;

use thiserror::Error;

/// Configuration problems: bad JSON, unknown keys, invalid hyperparameters,
/// missing referenced paths. CLI exit code 2.
#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

/// Dataset problems: missing directories, unreadable images, layout
/// violations. CLI exit code 3.
#[derive(Debug, Error)]
#[error("data error: {0}")]
pub struct DataError(pub String);

/// Exit code contract: 0 ok, 2 config error, 3 data error, 4 numerical
/// failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<DataError>().is_some() {
        return 3;
    }
    if let Some(core) = err.downcast_ref::<firm_core::Error>() {
        return match core {
            firm_core::Error::InvalidConfig(_)
            | firm_core::Error::KTooLarge { .. }
            | firm_core::Error::DimMismatch { .. } => 2,
            firm_core::Error::Io(_)
            | firm_core::Error::EmptyPool
            | firm_core::Error::EmptyBatch
            | firm_core::Error::EmptyBank
            | firm_core::Error::ModelFile(_)
            | firm_core::Error::SingleClass => 3,
            firm_core::Error::Numerical(_)
            | firm_core::Error::DegenerateEmbedding { .. }
            | firm_core::Error::NotUnitNorm { .. }
            | firm_core::Error::NonSquareRotation { .. }
            | firm_core::Error::CutPasteSamplingFailed { .. }
            | firm_core::Error::PatchSamplingFailed { .. } => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    4
}
