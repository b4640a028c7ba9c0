use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad shape, out-of-range rank, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("SVD of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    SvdNoConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("symmetric eigensolver did not converge for {dim}x{dim} matrix after {sweeps} sweeps")]
    EigenNoConvergence { dim: usize, sweeps: usize },

    #[error("Cholesky factorization failed: non-positive pivot {value:e} at index {index} (matrix not positive definite; try a larger tau)")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("triangular matrix has zero diagonal entry at index {index}")]
    SingularTriangular { index: usize },

    #[error("matrix is singular: zero pivot in column {index}")]
    Singular { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by the caller.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SvdNoConvergence { .. }
                | Error::EigenNoConvergence { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::SingularTriangular { .. }
                | Error::Singular { .. }
                | Error::NonFinite(_)
                | Error::Divergence { .. }
                | Error::Numeric(_)
        )
    }
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
