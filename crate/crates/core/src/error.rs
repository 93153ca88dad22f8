use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or graph structure do not line up.
    #[error("structural error: {0}")]
    Structure(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    /// The caller violated an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// The memory budget cannot hold even a single block.
    #[error("budget too small: {capacity_mb:.4} MB cannot train block {block} (needs {required_mb:.4} MB)")]
    BudgetTooSmall {
        block: usize,
        required_mb: f64,
        capacity_mb: f64,
    },

    /// A stored record failed its integrity checks.
    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    /// Invalid experiment configuration; `key` names the offending entry.
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A dataset file is absent; `hint` says how to obtain it.
    #[error("missing data file {path}: {hint}")]
    MissingData { path: PathBuf, hint: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
