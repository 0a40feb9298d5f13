use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (failing pivot at index {index})")]
    NotPositiveDefinite { index: usize },

    #[error("weight matrix {0} is not symmetric positive definite")]
    WeightNotPositiveDefinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("small Woodbury correction system is singular")]
    SingularSmallSystem,

    #[error("invalid interval: lower {lower} is not below upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("invalid bounds on {0}: lower must be strictly below upper")]
    InvalidBounds(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("problem file: {0}")]
    ProblemFile(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
