use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("sampling error: anchor {anchor} {reason}")]
    Sampling { anchor: usize, reason: String },
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Version(_) => 2,
            Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Shape(_)
            | Error::Pairing(_)
            | Error::Sampling { .. }
            | Error::InvalidSetup(_)
            | Error::InsufficientSamples(_) => 3,
            Error::Degenerate(_) | Error::Contract(_) => 4,
        }
    }
}
