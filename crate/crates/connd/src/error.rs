//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of its documented domain.
    #[error("invalid parameter `{name}`: {message}")]
    Parameter { name: &'static str, message: String },

    /// Tensor shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A configuration is internally inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file does not follow its declared format.
    #[error("format error in {path} at offset {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// A metric is undefined for the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn parameter(name: &'static str, message: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// True when the error stems from user input (bad config, missing or
    /// malformed files) rather than an internal fault. The CLI maps this to
    /// its exit-code convention.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Parameter { .. }
            | Error::ShapeMismatch { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::UndefinedMetric(_) => true,
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            Error::Serialization(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
