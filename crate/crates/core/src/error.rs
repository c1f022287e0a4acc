//! Error type shared by all solver components.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("constitutive law evaluated outside its domain on element {element}: {what}")]
    Domain { element: usize, what: String },

    #[error("assembly produced a non-finite value on element {element}")]
    Assembly { element: usize },

    #[error("degenerate face: {0}")]
    DegenerateFace(String),

    #[error("linear solver failed: {reason} (achieved relative residual {achieved:.3e})")]
    LinearSolver { reason: String, achieved: f64 },

    #[error("nonlinear solve failed after {iterations} iterations: {reason} (residual {residual:.3e})")]
    NonlinearFailure {
        iterations: usize,
        reason: String,
        residual: f64,
    },

    #[error("time step failed at t = {t}: scheme {scheme}: {reason}")]
    StepFailure {
        t: f64,
        scheme: String,
        reason: String,
    },
}
