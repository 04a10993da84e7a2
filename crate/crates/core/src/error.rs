use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or flags that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset content that violates its declared format or task.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The API was called out of order (stale cache, empty dataset, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error in {}: {message} (at {location})", path.display())]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
