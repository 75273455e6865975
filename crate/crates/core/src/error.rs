use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single field-level problem found while validating a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("integration step {dt} s exceeds the stability limit {limit} s")]
    Stability { dt: f64, limit: f64 },

    #[error("invalid two-qubit state: {0}")]
    InvalidState(String),

    #[error("visibility is undefined when all four coincidence counts are zero")]
    UndefinedVisibility,

    #[error("{0} is undefined for a zero denominator")]
    DivisionUndefined(&'static str),

    #[error("unknown polarization label `{0}`")]
    UnknownLabel(String),

    #[error("state reconstruction failed: {0}")]
    ReconstructionFailed(String),

    #[error("invalid scenario:\n{}", format_issues(.0))]
    InvalidConfig(Vec<FieldIssue>),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[FieldIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
