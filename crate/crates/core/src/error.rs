use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A hyperparameter or geometry setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (empty bag, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Teacher/student/moment tensors disagree on names or shapes.
    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A binary container could not be decoded.
    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("incompatible {what} version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
