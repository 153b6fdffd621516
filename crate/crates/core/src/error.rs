use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("Hurst parameter {0} outside the open interval (1/2, 1)")]
    Hurst(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("covariance matrix is not positive definite (pivot {pivot}) after diagonal jitter")]
    NotPositiveDefinite { pivot: usize },

    #[error("ellipticity violated at {point:?}: |det sigma| = {det:e}")]
    Ellipticity { point: Vec<f64>, det: f64 },

    #[error("Young integral refinement did not converge: {0}")]
    NonConvergent(String),

    #[error("solution left the |x| <= 1e6 ball at step {step}")]
    BlowUp { step: usize },

    #[error("non-finite vector field evaluation at step {step}")]
    NonFinite { step: usize },

    #[error("estimate invalidated: {blowups} of {total} paths blew up")]
    TooManyBlowUps { blowups: usize, total: usize },

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Hurst(_) | Error::InvalidParameter(_) | Error::GridMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
