use thiserror::Error;

use crate::domain::MetricId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("record #{index} ({pair_id}) references unknown model `{model}`")]
    UnknownModel {
        index: usize,
        pair_id: String,
        model: String,
    },

    #[error("comparison graph for {metric} is disconnected: components {components:?}")]
    Disconnected {
        metric: MetricId,
        components: Vec<Vec<String>>,
    },

    #[error("missing feature score for video(s): {}", .0.join(", "))]
    MissingFeature(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("corrupt log at line {line} (last valid sequence number: {last_valid_seq:?}): {reason}")]
    CorruptLog {
        line: usize,
        last_valid_seq: Option<u64>,
        reason: String,
    },

    #[error("judgment source failed: {0}")]
    Source(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for exit codes and HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
    NotFound,
    Conflict,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_) | Error::Disconnected { .. } => ErrorKind::Numeric,
            Error::Validation(_)
            | Error::UnknownModel { .. }
            | Error::MissingFeature(_)
            | Error::CorruptLog { .. }
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Validation,
            Error::NotFound(_) => ErrorKind::NotFound,
            Error::Conflict(_) => ErrorKind::Conflict,
            Error::Source(_) | Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
