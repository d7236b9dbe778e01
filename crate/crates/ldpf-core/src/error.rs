//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum LdpfError {
    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Input vector has (near-)zero norm where a direction is required.
    #[error("degenerate feature vector")]
    DegenerateFeature,

    /// Weighted combination collapsed to the zero vector.
    #[error("degenerate fusion")]
    DegenerateFusion,

    /// A scalar that must be finite/positive is not.
    #[error("invalid scalar: {0}")]
    InvalidScalar(String),

    /// An index is outside its valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A collection that must be nonempty is empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Dataset/config failed validation before any work was done.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset directory problems (missing root, inconsistent label sets, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training-path code asked for annotations it is not allowed to see.
    #[error("annotation access denied: domain annotations are hidden from the training path unless the no-clustering ablation is active")]
    AnnotationAccessDenied,

    /// Backbone weights could not be found or loaded.
    #[error("missing weights: {0}")]
    MissingWeights(String),

    /// A loss or parameter became non-finite during training.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    /// Checkpoint fingerprint does not match the active encoder pair.
    #[error("encoder fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    /// Malformed serialized artifact (checkpoint, dump, report, config).
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LdpfError>;
