use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CareError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} below threshold {threshold:e}")]
    NotPsd { eigenvalue: f64, threshold: f64 },

    #[error("singular matrix: eigenvalue {eigenvalue:e} below {min_eig:e}; apply shrinkage first")]
    Singular { eigenvalue: f64, min_eig: f64 },

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("infeasible budget: {budget} is below the minimum {required}")]
    InfeasibleBudget { budget: usize, required: usize },

    #[error("{0} did not converge")]
    NonConvergence(&'static str),
}

impl CareError {
    /// True for failures of the numerical routines themselves (as opposed to
    /// bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CareError::NotPsd { .. } | CareError::Singular { .. } | CareError::NonConvergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CareError>;

pub(crate) fn mismatch(msg: impl Into<String>) -> CareError {
    CareError::DimensionMismatch(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> CareError {
    CareError::InvalidArgument(msg.into())
}
