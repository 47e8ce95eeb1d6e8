use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CiderError {
    #[error("{path}:{line}: malformed record: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("domain {0} has no interactions")]
    EmptyDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure in {component}: {detail}")]
    Numeric { component: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("user {user} has only {available} eligible negatives, {required} required")]
    InsufficientNegatives {
        user: String,
        available: usize,
        required: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, CiderError>;

impl CiderError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CiderError::Contract(msg.into())
    }

    pub(crate) fn numeric(component: impl Into<String>, detail: impl Into<String>) -> Self {
        CiderError::Numeric {
            component: component.into(),
            detail: detail.into(),
        }
    }
}
