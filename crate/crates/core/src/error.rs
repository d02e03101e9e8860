use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index}, tolerance {tolerance:.3e})")]
    NotPositiveDefinite {
        index: usize,
        pivot: f64,
        tolerance: f64,
    },
    #[error("matrix is not symmetric positive semi-definite: {0}")]
    NotSymPsd(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate variance of the linear projection: {0}")]
    DegenerateVariance(f64),
    #[error("missing rate unreachable for feature {feature}: peak probability {required_k:.4} > 1")]
    UnreachableRate { feature: usize, required_k: f64 },
    #[error("effective sample size {ess:.1} below 100; raise the number of samples")]
    EffectiveSampleTooSmall { ess: f64 },
    #[error("feature {feature} is never observed")]
    EmptyColumn { feature: usize },
    #[error("features {i} and {j} are jointly observed in fewer than 2 rows")]
    EmptyPair { i: usize, j: usize },
    #[error("non-finite value in {context}")]
    NonFiniteValue { context: String },
    #[error("no valid split")]
    NoValidSplit,
    #[error("target has zero variance")]
    ZeroVariance,
    #[error("unsupported regression function for this check: {0}")]
    UnsupportedFstar(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Config(String),
}
