use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("line search failed after {backtracks} backtracks")]
    LineSearchFailure { backtracks: usize },

    /// The supplied point is not (close enough to) a KKT point.
    #[error("stale point: KKT residual {residual:.3e} exceeds {tol:.1e}")]
    StalePoint { residual: f64, tol: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
