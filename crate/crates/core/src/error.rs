use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric divergence{}: {detail}", fmt_iteration(*iteration))]
    NumericDivergence {
        iteration: Option<u64>,
        detail: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{kind} recovery of stage {stage} is not supported: {reason}")]
    UnsupportedRecovery {
        kind: &'static str,
        stage: usize,
        reason: String,
    },

    #[error("unrecoverable failure at iteration {iteration}: {reason}")]
    Unrecoverable { iteration: u64, reason: String },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_iteration(iteration: Option<u64>) -> String {
    match iteration {
        Some(i) => format!(" at iteration {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn divergence(detail: impl Into<String>) -> Self {
        Error::NumericDivergence {
            iteration: None,
            detail: detail.into(),
        }
    }

    /// Attaches an iteration index to a numeric-divergence error that does not carry one yet.
    pub fn at_iteration(self, iteration: u64) -> Self {
        match self {
            Error::NumericDivergence {
                iteration: None,
                detail,
            } => Error::NumericDivergence {
                iteration: Some(iteration),
                detail,
            },
            other => other,
        }
    }

    pub fn is_unrecoverable(&self) -> bool {
        matches!(self, Error::Unrecoverable { .. })
    }
}
