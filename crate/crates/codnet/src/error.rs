//! Crate-wide error type.

use thiserror::Error;

/// Anything that can go wrong between parsing a config and writing a report.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong shape for the operation that received it.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An input value (not shape) was out of the accepted domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration file or field rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss left the finite range.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch_ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Attach a path to an [`std::io::Error`].
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attach a path to an [`image::ImageError`].
    pub fn image(path: impl AsRef<std::path::Path>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
