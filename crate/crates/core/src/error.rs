//! Crate-wide error type.

use std::path::PathBuf;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors fed to an op do not have compatible shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `backward` was called on a tensor that is not scalar-shaped.
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// A finite-difference check reached an op without a true derivative.
    #[error("graph contains non-smooth op `{0}`; finite-difference check does not apply")]
    NonSmoothGraph(&'static str),

    /// A configuration or argument value is outside its legal range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An attractor pattern contained an entry other than -1 or +1.
    #[error("pattern entries must be -1 or +1, found {0}")]
    NonBipolar(f64),

    /// A probe or pattern does not match the memory dimension.
    #[error("dimension mismatch: memory stores {expected}-d patterns, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// Silhouette is undefined when every sample shares one label.
    #[error("silhouette undefined: all samples belong to a single cluster")]
    SingleCluster,

    /// A silhouette value left the mathematically possible range.
    #[error("silhouette score {0} outside [-1, 1]")]
    ScoreOutOfRange(f64),

    /// A sequence op was handed zero timesteps.
    #[error("empty sequence: at least one timestep is required")]
    EmptySequence,

    /// The contrastive loss needs at least two samples.
    #[error("batch of {0} is too small for a contrastive loss (need >= 2)")]
    BatchTooSmall(usize),

    /// Raw event bytes ended mid-record.
    #[error("truncated event record at byte {offset}: {remaining} trailing bytes")]
    TruncatedRecord { offset: usize, remaining: usize },

    /// An event lies outside the sensor plane.
    #[error("event coordinate ({x}, {y}) outside {dim}x{dim} plane at byte {offset}")]
    CoordOutOfRange {
        x: u8,
        y: u8,
        dim: usize,
        offset: usize,
    },

    /// An unrecognised model identifier was requested.
    #[error("unknown model id `{0}`; expected one of M1, M2, M3, M4, M5")]
    UnknownModel(String),

    /// A dataset directory or file is absent.
    #[error("dataset not found at {path}: {hint}")]
    DatasetMissing { path: PathBuf, hint: String },

    /// A checkpoint file is malformed or of the wrong version.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
