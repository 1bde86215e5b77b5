use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("gram matrix is singular even after jitter {jitter:e}")]
    SingularGram { jitter: f64 },

    #[error("curvature system is singular; pass a positive regulariser")]
    SingularCurvature,

    #[error("iteration diverged: {0}")]
    Diverged(String),

    #[error("mirror map domain violation: {0}")]
    Domain(String),

    #[error("cubic subproblem did not converge after {0} bisection steps")]
    Subproblem(usize),

    #[error("layer {0} has zero operator norm")]
    DegenerateLayer(usize),

    #[error("gradient vanished at layer {0}; update skipped")]
    ZeroGradient(usize),

    #[error("negative quadratic form {0:e}: gram is not positive semi-definite")]
    PsdViolation(f64),

    #[error("rejection acceptance {0:e} below 1e-4; switch to coordinate-gibbs")]
    AcceptanceTooLow(f64),

    #[error("mean direction is orthogonal to the query; agreement is ambiguous")]
    AmbiguousMean,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Length(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("class balance outside 60/40 after {0} retries")]
    Balance(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
