use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A metric (or a factorized matrix) lost positive definiteness.
    #[error("metric not positive definite at node {node}: min eigenvalue {min_eig:e}")]
    NotPositiveDefinite { node: usize, min_eig: f64 },

    /// Explicit step exceeds the parabolic stability bound.
    #[error("step {dt:e} exceeds stability bound {limit:e}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("need at least {need} snapshots, have {have}")]
    InsufficientSnapshots { have: usize, need: usize },

    #[error("tangent vector is zero")]
    ZeroVector,

    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no completed run in {0}")]
    MissingRun(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable name used in failure records and CLI messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::StepTooLarge { .. } => "StepTooLarge",
            Error::InsufficientSnapshots { .. } => "InsufficientSnapshots",
            Error::ZeroVector => "ZeroVector",
            Error::BadParameter(_) => "BadParameter",
            Error::GridMismatch(_) => "GridMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::Format(_) => "Format",
            Error::Config(_) => "Config",
            Error::MissingRun(_) => "MissingRun",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
