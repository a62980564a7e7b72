//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Shape problems carry the
//! offending dimensions as text so a failed call can be diagnosed from the
//! message alone, without a debugger.

use std::path::PathBuf;

/// Errors produced by tensor ops, the model, the data pipeline and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A dimension must be divisible by some factor and is not.
    #[error("{op}: {what} = {value} must be divisible by {divisor}")]
    NotDivisible {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    /// An argument is outside its legal range.
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// `backward` was called on a scalar that is not 1x1x1x1.
    #[error("backward: loss must be a 1x1x1x1 scalar, got {shape}")]
    NonScalarLoss { shape: String },

    /// `backward` was called twice on the same graph.
    #[error("backward: gradients for this graph were already computed")]
    BackwardTwice,

    /// Batch statistics are undefined: a single value per channel.
    #[error("batchnorm2d: N*H*W = 1 in training mode, variance is degenerate")]
    DegenerateBatchNorm,

    /// A forward pass or loss produced NaN/Inf.
    #[error("non-finite value detected at {context}")]
    NonFinite { context: String },

    /// Estimated activation memory would exceed the configured budget.
    #[error("memory budget exceeded: would use >= {required} bytes, budget {budget} bytes")]
    MemoryBudget { required: u64, budget: u64 },

    /// A parameter name was not found in the store.
    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    /// Checkpoint bytes do not follow the expected layout.
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    /// Checkpoint parameters do not match the model being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// A label map contains a class id outside 0..=5.
    #[error("label map contains invalid class id {class} at index {index}")]
    InvalidClass { class: u8, index: usize },

    /// Train-config file is syntactically or semantically invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An image file could not be decoded, or has the wrong layout.
    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    /// Training aborted because the loss became non-finite.
    #[error("training aborted at step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },

    /// Filesystem failure, wrapped with the path involved.
    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for [`Error::InvalidArgument`].
    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
