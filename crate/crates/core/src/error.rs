use std::io;

use thiserror::Error;

/// Errors produced anywhere in the offline or online pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("chain file line {line}: {message}")]
    ChainParse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("nonpositive variance {0}")]
    NonPositiveVariance(f64),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("key not found in dictionary: {0}")]
    MissingKey(String),

    #[error("selector index {index} out of range ({available} available)")]
    SelectorOutOfRange { index: usize, available: usize },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("malformed goal: {0}")]
    Goal(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidChain(_) => "invalid_chain",
            Error::ChainParse { .. } => "chain_parse",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ModeMismatch(_) => "mode_mismatch",
            Error::NonPositiveVariance(_) => "nonpositive_variance",
            Error::Diverged { .. } => "diverged",
            Error::Empty(_) => "empty",
            Error::MissingKey(_) => "missing_key",
            Error::SelectorOutOfRange { .. } => "selector_out_of_range",
            Error::ArtifactMismatch(_) => "artifact_mismatch",
            Error::Format(_) => "format",
            Error::Goal(_) => "malformed_goal",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
