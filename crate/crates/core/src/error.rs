//! Crate-wide error type. Variants map 1:1 onto the CLI's exit-code
//! categories, so keep them coarse.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad or inconsistent configuration (unknown keys, invalid ranges,
    /// fewer groups than folds, ...). Detected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// Runtime validation failure on otherwise well-formed input
    /// (out-of-range pixels, out-of-bounds landmark, domain mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor/shape contract violation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A required upstream artifact (checkpoint, manifest) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Train/test contamination detected by the fusion leakage guard.
    #[error("data leakage: {0}")]
    Leakage(String),

    /// Frozen-model or optimizer-isolation contract violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file content; names the offending record.
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    /// I/O failure with path context.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
