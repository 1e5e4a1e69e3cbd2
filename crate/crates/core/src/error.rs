use std::path::PathBuf;

use crate::optimizers::RunTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("zero accumulator: set G0 > 0 or nonzero first gradient")]
    ZeroAccumulator,

    /// A run produced a non-finite or exploding iterate. The partial trace
    /// holds every record completed before the offending iteration.
    #[error("numeric divergence at iteration {iteration}")]
    Divergence {
        iteration: usize,
        partial: Box<RunTrace>,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
