use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: {1}")]
    InvalidShape(Vec<usize>, &'static str),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("vector kind mismatch: model expects {expected} vectors, got {got}")]
    VectorKind {
        expected: &'static str,
        got: &'static str,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image format error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("classifier did not reach accuracy {target} (best held-out accuracy {best:.4})")]
    ClassifierGate { target: f64, best: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
