//! Error type shared across the toolkit.
//!
//! Variants are grouped so the CLI can map failures onto its exit-code
//! contract: usage/config problems, data problems, numerical problems.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Architecture or parameter description violates an invariant.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Tensor shape does not match what a layer or operation expects.
    #[error("shape mismatch at {location}: expected {expected}, got {got}")]
    ShapeMismatch {
        location: String,
        expected: String,
        got: String,
    },

    /// NaN or Inf appeared; `location` names the first offending layer.
    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    /// Bad configuration file, unknown key, or invalid CLI usage.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset file missing, malformed, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Solver or optimization failure (ill-conditioned kernel, divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::Numerical(_) => 3,
        }
    }
}
