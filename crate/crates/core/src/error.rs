use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstgError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("node budget exceeded: {needed} regions > budget {budget}")]
    NodeBudget { needed: usize, budget: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DstgError>;
