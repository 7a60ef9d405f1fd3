use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{name} = {value} is outside {range}")]
    Range {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),
    #[error("negative sampled eigenvalue {eigenvalue:e} at {position:?}")]
    BadField { eigenvalue: f64, position: Vec<f64> },
    #[error("empty region: {0}")]
    EmptyRegion(&'static str),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("solver failed to converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },
    #[error(
        "power iteration stagnated after {iterations} iterations (relative change {change:e})"
    )]
    Stagnation { iterations: usize, change: f64 },
    #[error("fit needs at least {needed} usable points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
