//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HpptError>;

#[derive(Debug, Error)]
pub enum HpptError {
    #[error("range error: {0}")]
    Range(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("power iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("loss diverged at step {step} (loss = {loss}); try a smaller learning_rate")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HpptError {
    /// Stable machine-readable tag used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            HpptError::Range(_) => "range",
            HpptError::Conflict(_) => "conflict",
            HpptError::NotFound(_) => "not_found",
            HpptError::Dimension(_) => "dimension",
            HpptError::Convergence { .. } => "convergence",
            HpptError::Degenerate(_) => "degenerate",
            HpptError::Divergence { .. } => "divergence",
            HpptError::Argument(_) => "argument",
            HpptError::MissingData(_) => "missing_data",
            HpptError::Config(_) => "config",
            HpptError::Incompatible(_) => "incompatible",
            HpptError::Format(_) => "format",
            HpptError::Io(_) => "io",
            HpptError::Json(_) => "json",
        }
    }
}
