//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("point outside domain: {0}")]
    Domain(String),

    #[error("deformation scalar |K| = {value:e} below threshold {threshold:e}")]
    DegenerateDeformation { value: f64, threshold: f64 },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("unknown structure `{0}` for system `{1}`")]
    UnknownStructure(String, String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("system self-check failed: {0}")]
    SelfCheck(String),

    #[error("Newton iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("singular Newton matrix (condition estimate {condition:e})")]
    SingularNewton { condition: f64 },

    #[error("elliptic parameter m = {0} outside [0, 1)")]
    ModulusOutOfRange(f64),

    #[error("step size underflow at t = {t:e}; trajectory truncated")]
    StepUnderflow { t: f64 },

    #[error("quadrature failed to reach tolerance {tol:e} (estimate {estimate:e})")]
    QuadratureFailure { tol: f64, estimate: f64 },

    #[error("interior turning point at q = {0} splits the integration branch")]
    BranchCrossing(f64),

    #[error("state off-shell: {0}")]
    OffShell(String),

    #[error("chart exit at t = {t}: {reason}")]
    ChartExit { t: f64, reason: String },

    #[error("branch condition violated: {0}")]
    BranchViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
