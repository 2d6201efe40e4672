use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the dispatcher, simulator and cloud link.
#[derive(Debug, Error)]
pub enum RapidError {
    #[error("sequencing error: expected step {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },

    #[error("timing error: dt = {dt_s} s outside accepted range [{min_s}, {max_s}]")]
    Timing { dt_s: f64, min_s: f64, max_s: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("protocol error: {0}")]
    Protocol(#[from] crate::protocol::FrameError),

    #[error("cloud rejected request: {0}")]
    Rejected(String),

    #[error("cloud request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("socket error: {0}")]
    Socket(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = RapidError> = std::result::Result<T, E>;

impl RapidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RapidError::Io {
            path: path.into(),
            source,
        }
    }
}
