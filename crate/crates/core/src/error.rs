//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Dimension or layout mismatch between inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value was produced; `location` names the segment or
    /// layer where it was first observed.
    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    /// Invalid configuration; `field` names the offending entry.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// LLC estimation failed (e.g. every chain diverged).
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Monte-Carlo volume estimate had too few hits at some threshold.
    #[error("insufficient hits for volume estimate at epsilon={epsilon}: {hits} < {required}")]
    InsufficientHits {
        epsilon: f64,
        hits: u64,
        required: u64,
    },

    /// Kernel matrix remained singular after jitter retries.
    #[error("singular kernel matrix after {retries} jitter retries")]
    SingularKernel { retries: usize },

    /// Checkpoint payload failed its checksum.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint was produced under an incompatible config.
    #[error("checkpoint compatibility error: file digest {found} does not match expected {expected}")]
    Compatibility { expected: String, found: String },

    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
