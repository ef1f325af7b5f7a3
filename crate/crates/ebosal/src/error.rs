//! Crate-wide error type.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An operation was called in a state its contract forbids.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// An index or id is out of range for its container.
    #[error("index out of range: {0}")]
    Index(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file content (checkpoint, CSV, config).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
