//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A row of an embedding batch has (near-)zero Euclidean norm, so it
    /// cannot be normalized. Signals a degenerate projector output.
    #[error("row {row} has Euclidean norm {norm:e}, below the 1e-12 floor")]
    ZeroNormRow { row: usize, norm: f64 },

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A softmax temperature must be strictly positive.
    #[error("temperature must be > 0, got {0}")]
    TemperatureNonPositive(f64),

    /// A matrix fails the row-stochastic invariant of a similarity distribution.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// A loss evaluated to NaN or infinity.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    /// Model components were configured with incompatible dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The simsiam objective requires a predictor head.
    #[error("objective `simsiam` requires a predictor config")]
    PredictorRequired,

    /// forward_predict called on a peer without a predictor head.
    #[error("model has no predictor head")]
    NoPredictor,

    /// Source image too small for the augmentation policy.
    #[error("image {width}x{height} too small for output size {output_size}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        output_size: usize,
    },

    /// No dataset with the given name at the given root.
    #[error("dataset `{name}` not found under {root}")]
    DatasetNotFound { name: String, root: PathBuf },

    /// Dataset files present but unreadable or failing the content checksum.
    #[error("corrupt dataset archive: {0}")]
    CorruptArchive(String),

    /// Class-balanced subsampling hit a class with no samples.
    #[error("class {0} has no samples")]
    EmptyClass(u32),

    /// Checkpoint loaded with a config hash different from the expected one.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// No loadable checkpoint at the given location.
    #[error("no checkpoint found at {0}")]
    CheckpointMissing(PathBuf),

    /// k exceeds the number of indexed training points.
    #[error("k={k} exceeds train size {train_size}")]
    KTooLarge { k: usize, train_size: usize },

    /// A run config failed validation; `key` is the offending key path.
    #[error("invalid config at `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },

    /// Trajectory plotting needs at least two checkpoints per run.
    #[error("run {0} has fewer than two checkpoints")]
    TooFewCheckpoints(PathBuf),

    /// Report aggregation found no evaluation reports.
    #[error("no evaluation reports under {0}")]
    NoReports(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::ConfigInvalid`].
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Shorthand for [`Error::ShapeMismatch`] from two shape slices.
    pub fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
