use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PacfError>;

#[derive(Debug, Error)]
pub enum PacfError {
    #[error("zero vector: norm {norm:e} is at or below the rejection threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("class {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("prototype for class {0} is uninitialized")]
    UninitializedPrototype(usize),

    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PacfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PacfError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_same_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(PacfError::DimensionMismatch { expected, got });
    }
    Ok(())
}
