use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("integer overflow computing {0}")]
    Overflow(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fundamental set construction failed for frequency {frequency}: best condition number {best_condition:.3e} after {attempts} attempts")]
    FundamentalSet {
        frequency: usize,
        best_condition: f64,
        attempts: usize,
    },

    #[error(
        "rank deficient phase set at frequency {frequency}: Cholesky failed after maximum jitter"
    )]
    RankDeficient { frequency: usize },

    #[error("negative eigenvalue {value:.3e} at frequency {frequency}")]
    NegativeEigenvalue { frequency: usize, value: f64 },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("indefinite predictive covariance: diagonal entry {value:.3e} at index {index}")]
    IndefiniteCovariance { index: usize, value: f64 },

    #[error("invalid target {value} at row {row} for {likelihood} likelihood")]
    InvalidTarget {
        row: usize,
        value: f64,
        likelihood: &'static str,
    },

    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("task mismatch: model expects {expected} data, got {actual}")]
    TaskMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Overflow(_) => "overflow",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::FundamentalSet { .. } => "fundamental_set",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NegativeEigenvalue { .. } => "negative_eigenvalue",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::IndefiniteCovariance { .. } => "indefinite_covariance",
            Error::InvalidTarget { .. } => "invalid_target",
            Error::Divergence { .. } => "divergence",
            Error::TaskMismatch { .. } => "task_mismatch",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
