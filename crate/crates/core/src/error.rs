use thiserror::Error;

use crate::pullback::NonConvergenceReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("state diverged at step {step} (t = {time}); the model left the absorbing region")]
    Divergence { step: usize, time: f64 },

    #[error("{diverged} of {total} ensemble members diverged (limit 0.1%); first at t = {time}")]
    EnsembleDivergence {
        diverged: usize,
        total: usize,
        time: f64,
    },

    #[error("grid misalignment: {0}")]
    GridMisaligned(String),

    #[error("noise window too short: {0}; pre-sample a longer path")]
    NoiseWindow(String),

    #[error("covariance is singular or ill-conditioned (condition number {condition:.3e}); use the KDE estimator or regularize")]
    SingularCovariance { condition: f64 },

    #[error("pullback did not converge within {} periods (last residual {:.3e}, tol {:.3e})", .0.n_max_periods, .0.last_residual(), .0.tol)]
    NonConvergence(Box<NonConvergenceReport>),

    #[error("response table does not cover lag {needed} (max lag {available})")]
    LagCoverage { needed: f64, available: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("relative error undefined: reference curve has zero norm")]
    UndefinedRelative,

    #[error("config error at `{pointer}`: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
