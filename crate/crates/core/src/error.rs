//! Crate-wide error type for recoverable failures.
//!
//! Only external-input problems (files, configs, CLI arguments) are
//! errors. Internal numeric violations — shape mismatches, non-finite
//! values — are bugs and panic at the site that detects them.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
