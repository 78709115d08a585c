use std::io;

use thiserror::Error;

/// Errors produced anywhere in the training engine, penalties, data pipeline and reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("log-probability undefined: class {0} has probability 0")]
    ZeroProbability(usize),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("penalty configuration: {0}")]
    Penalty(String),
    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: String, expected: u32, found: u32 },
    #[error("truncated {0}")]
    Truncated(String),
    #[error("{0}")]
    Format(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
