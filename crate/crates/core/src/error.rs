use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments violate an operation's preconditions (shapes, ranges, config values).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An object was used out of order, e.g. backward before forward.
    #[error("invalid state: {0}")]
    State(String),

    /// Internal data that should agree does not, e.g. overlapping pseudo-label supports.
    #[error("consistency violation: {0}")]
    Consistency(String),

    /// A file on disk does not match the expected layout.
    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
