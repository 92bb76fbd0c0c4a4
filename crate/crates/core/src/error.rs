//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    /// A (DoV, label) pair has no target distribution yet. For zero-shot
    /// composition this signals that the S2 inference path is required.
    #[error("no target distribution for DoV {dov} label {label}")]
    MissingLabel { dov: usize, label: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (config files, CLI values)
    /// as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Unsupported(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
