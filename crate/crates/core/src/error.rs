//! Crate-wide error type.
//!
//! Validation problems (bad configs, shape mismatches) are separated from
//! runtime problems (I/O, corrupt files, exhausted retries) so the CLI can map
//! them to distinct exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values, caught before any work runs.
    #[error("invalid config: {0}")]
    Config(String),

    /// Tensor / image dimension violations. The message names the offending
    /// layer or operand.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Required input data is missing (splits, checkpoints, directories).
    #[error("missing data: {0}")]
    MissingData(String),

    /// Stroke-mask sampling failed to hit the coverage window.
    #[error("mask generation failed: {0}")]
    MaskGeneration(String),

    /// Malformed or corrupt checkpoint file.
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// Malformed image file.
    #[error("image {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors a user can fix by editing inputs before anything runs;
    /// the CLI reports these with a dedicated exit code.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
