use thiserror::Error;

/// Errors raised by the damping optimization library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{name}` is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { name: String, asymmetry: f64 },

    #[error("matrix `{0}` is not positive definite")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("system matrix is not asymptotically stable: {0}")]
    Unstable(String),

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("requested order {requested} exceeds numerical rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("basis enrichment stalled: {0}")]
    Livelock(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
