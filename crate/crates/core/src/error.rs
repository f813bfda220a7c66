use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Offending configuration captured when an exact bound fails to hold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub check: String,
    pub eta: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("frame budget {0} is not in the admissible set")]
    InvalidBudget(u32),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("loss evaluated to a non-finite value at a probe point")]
    NonFiniteLoss,

    #[error("power iteration did not converge after {iterations} iterations")]
    ConvergenceFailure { iterations: usize },

    #[error("video gradient is zero")]
    ZeroVideoGradient,

    #[error("smoothness constant must be positive, got {0}")]
    InvalidBeta(f64),

    #[error("model has non-zero noise (base_std = {0}); population gradients required")]
    NoisyModel(f64),

    #[error("bound violated ({}) at eta = {}: loss {} -> {}", .0.check, .0.eta, .0.loss_before, .0.loss_after)]
    PropositionViolation(Box<Violation>),

    #[error("at least two draws are required, got {0}")]
    InvalidDrawCount(usize),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("divergence detected at step {step}: loss {loss:e}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("invalid dimension scores: {0}")]
    InvalidScores(String),

    #[error("no frame embeddings supplied")]
    EmptyEmbeddings,

    #[error("predictor transport failure: {0}")]
    TransportFailure(String),

    #[error("predictor rate limited: {0}")]
    RateLimited(String),

    #[error("invalid predictor response: {0:?}")]
    InvalidResponse(String),

    #[error("sample is missing required input: {0}")]
    MissingInput(String),

    #[error("parse error in {path}: {message} (line {line}, column {column})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Transport and rate-limit failures are worth retrying; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::TransportFailure(_) | Error::RateLimited(_))
    }
}
