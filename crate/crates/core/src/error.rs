use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A file did not follow the expected binary or text layout.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// A textual input (schedule string, config file) failed to parse.
    /// `position` is a byte offset for one-line inputs and a 1-based line
    /// number for multi-line files.
    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion found incomplete samples.
    #[error("incomplete samples: {}", .0.join(", "))]
    MissingSamples(Vec<String>),

    /// Training produced non-finite losses for too many consecutive steps.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A checked contract (gradient tolerance, frozen parameters) failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
