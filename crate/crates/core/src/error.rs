use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by file I/O, configuration and training.
///
/// Shape mismatches inside the tape and other caller contract violations
/// panic instead; they indicate a programming error, not bad input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
