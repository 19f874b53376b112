use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument has the wrong shape or is out of range.
    #[error("input error: {0}")]
    Input(String),
    /// The operation is not valid in the current state (e.g. sampling an empty buffer).
    #[error("state error: {0}")]
    State(String),
    /// The environment lacks a required capability.
    #[error("capability error: {0}")]
    Capability(String),
    /// Malformed text input.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Malformed binary file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
