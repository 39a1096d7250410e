//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands with incompatible shapes reached an op.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside an op's numeric domain (log of a non-positive value,
    /// normalizing a zero row, overflow to non-finite, ...).
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Config validation report; one entry per violated constraint.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    /// Training produced a non-finite loss; the run is aborted.
    #[error("non-finite loss at client {client}, round {round}, batch {batch}")]
    NonFiniteLoss {
        client: usize,
        round: usize,
        batch: usize,
    },

    /// Persisted dataset is malformed (bad manifest, truncated blob, ...).
    #[error("dataset format: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag, used by the CLI's stderr output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Domain { .. } => "domain",
            Error::NonScalarRoot { .. } => "non_scalar_root",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::DataFormat(_) => "data_format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
