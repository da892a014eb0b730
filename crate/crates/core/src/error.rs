use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum HvqError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {reason} (at byte {offset})")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HvqError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvqError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, bad data) as opposed
    /// to internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, HvqError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, HvqError>;
