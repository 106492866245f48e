use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's domain (bad month, empty input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown security `{0}`")]
    NotFound(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty universe: {0}")]
    EmptyUniverse(String),

    #[error("singular normal equations ({0}); use ridge_lambda > 0")]
    Singular(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Divergence { epoch: usize, batch: usize },

    /// A caller broke an interface contract (shape mismatch, participation above cap, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad data or broken contracts rather than usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
