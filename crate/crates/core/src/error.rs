use thiserror::Error;

/// Errors raised by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate encountered")]
    NonFinite,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("invalid rigid transform: {0}")]
    InvalidRotation(String),
    #[error("mixture component count {k} exceeds point count {n}")]
    KExceedsN { k: usize, n: usize },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("covariance lost positive definiteness after mapping (component {0})")]
    CovarianceNotPd(usize),
    #[error("TPS system is singular or ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, pair {pair_id}")]
    NonFiniteLoss { epoch: usize, pair_id: String },
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
