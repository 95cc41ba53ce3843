use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration (missing vocabulary, invalid field, unknown key).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (shape mismatch, wrong family, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Protocol violation (train/test leakage, single-class metric input).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
