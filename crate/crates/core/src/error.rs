use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("bias matrix violates the norm bound: ||bias||^2 = {norm_sq} > D = {bound}")]
    BiasBound { norm_sq: f64, bound: f64 },
    #[error("environment {0} is already a flipped test environment")]
    AlreadyFlipped(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {0} has no samples")]
    MissingClass(i8),
    #[error("no feasible projection at the floor dimension {floor} (residual {residual:e})")]
    InfeasibleFloor { floor: usize, residual: f64 },
    #[error("environments exhausted after {rounds} rounds with {dim} dimensions left (target {target})")]
    EnvironmentsExhausted { rounds: usize, dim: usize, target: usize },
    #[error("optimizer diverged after {iterations} iterations")]
    Divergence { iterations: usize },
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("predictor is identically zero")]
    ZeroPredictor,
    #[error("no checks selected")]
    NoChecksSelected,
    #[error("empty results")]
    EmptyResults,
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
