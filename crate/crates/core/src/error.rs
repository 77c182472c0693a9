use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor arithmetic, solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid partitions, bad hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain of a functional (negative mass, zero marginal, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A NaN or infinity reached a place where only finite reals may be stored.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
