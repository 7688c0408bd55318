use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum SureError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("version mismatch: file has version {found}, this build expects {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SureError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SureError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SureError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SureError> = std::result::Result<T, E>;
