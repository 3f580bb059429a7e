use thiserror::Error;

/// A point on an r(q) curve, recorded when certification fails.
pub type CurvePoint = (f64, f64);

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "not overparameterized: sample count {samples} must be below parameter dimension {params}"
    )]
    NotOverparameterized { params: usize, samples: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },

    #[error(
        "minimum search did not converge: best loss {best_loss:e} after {iterations} iterations"
    )]
    NonConvergence { best_loss: f64, iterations: usize },

    #[error("frame collapsed at step {step}: diagonal ratio {ratio:e}")]
    FrameCollapse { step: usize, ratio: f64 },

    #[error("enumeration of {required} sequences exceeds budget {budget}")]
    BudgetExceeded { required: f64, budget: u64 },

    #[error("factor {factor} maps grid node {node} to (numerically) zero")]
    SingularFactor { factor: usize, node: usize },

    #[error("power iteration did not converge after {iterations} sweeps (last r = {r}, oscillation {oscillation:e})")]
    NoConvergence {
        iterations: usize,
        r: f64,
        oscillation: f64,
    },

    #[error("no drift certificate on the p grid: {reason}")]
    NoCertificate {
        reason: String,
        curve: Vec<CurvePoint>,
    },

    #[error("unsupported dimension {0}: sphere discretization requires N in {{2, 3}}")]
    UnsupportedDimension(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
