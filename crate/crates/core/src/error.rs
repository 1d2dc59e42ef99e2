use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the inference kernel.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid weight matrix: {0}")]
    InvalidWeights(&'static str),
    #[error("degenerate weights: grounded Laplacian is numerically singular (pivot ratio {pivot_ratio:e})")]
    DegenerateWeights { pivot_ratio: f64 },
    #[error("tree enumeration refused for {size} nodes (limit 8)")]
    TooManyNodes { size: usize },
    #[error("prior calibration failed: {0}")]
    Calibration(String),
    #[error("perfect correlation between variables {i} and {j} (rho = {rho})")]
    PerfectCorrelation { i: usize, j: usize, rho: f64 },
    #[error("singular precision block")]
    SingularPrecision,
    #[error("invalid precision: 2x2 minor for ({i}, {j}) is not positive")]
    InvalidPrecision { i: usize, j: usize },
    #[error("degenerate posterior: no spanning tree has positive weight")]
    DegeneratePosterior,
    #[error("invalid second moment for hidden node {index}: {value}")]
    InvalidMoment { index: usize, value: f64 },
    #[error("m-step failed on diagonal entry {index}: {detail}")]
    MStepFailure { index: usize, detail: &'static str },
    #[error("likelihood diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("initialization fallback: fewer than three eligible nodes")]
    InitializationFallback,
    #[error("degenerate clique {clique:?}: zero variance")]
    DegenerateClique { clique: Vec<usize> },
    #[error("no identifiable set of {r} hidden nodes")]
    InfeasibleHiddenSet { r: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("degenerate ROC: {positives} positives, {negatives} negatives")]
    DegenerateRoc { positives: usize, negatives: usize },
    #[error("spurious-edge curve undefined: no spurious edges")]
    DegenerateCurve,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = core::result::Result<T, Error>;
