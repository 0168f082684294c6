use thiserror::Error;

pub type Result<T> = std::result::Result<T, CohworkError>;

#[derive(Debug, Error)]
pub enum CohworkError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("truncation guard tripped: {0}")]
    TruncationGuard(String),
    #[error("degenerate Kraus branch: weight {weight:.3e}")]
    DegenerateBranch { weight: f64 },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
