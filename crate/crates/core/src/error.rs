use thiserror::Error;

/// Errors raised by the solvers, the simulator and the spec loader.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("precondition failed [{check}]: {detail}")]
    Precondition { check: String, detail: String },

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("policy is not information-measurable: {0}")]
    NotMeasurable(String),

    #[error("{context}: matrix is singular or not positive definite")]
    Singular { context: String },

    #[error("coupling system singular: {0}")]
    CouplingSingular(String),

    #[error("{context}: no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
        series: Vec<f64>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn precondition(check: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Precondition {
            check: check.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn singular(context: impl Into<String>) -> Self {
        Error::Singular {
            context: context.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Precondition { .. }
            | Error::Unsupported(_)
            | Error::NotMeasurable(_) => 1,
            Error::Singular { .. } | Error::CouplingSingular(_) | Error::NonConvergence { .. } => 2,
            Error::Input(_) | Error::Io(_) | Error::Parse(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
