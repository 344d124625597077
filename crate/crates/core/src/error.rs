//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    /// A `SequenceSpec` violates its invariants.
    #[error("invalid sequence spec: {0}")]
    InvalidSpec(String),

    /// Caller-supplied data is malformed or out of range.
    #[error("invalid input: {0}")]
    Input(String),

    /// An activation or gradient became NaN/inf.
    #[error("non-finite value in {location}")]
    Numeric { location: String },

    /// Training diverged; the last finite parameters were written to `checkpoint`.
    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage needs an artifact that no earlier stage produced.
    #[error("stage `{stage}` is missing its dependency: {detail}")]
    Dependency { stage: String, detail: String },

    /// Probe training split lacks one of the two classes.
    #[error("degenerate probe split: {0}")]
    DegenerateSplit(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::InvalidSpec(_) | LabError::Config(_) => 2,
            LabError::Numeric { .. } | LabError::Diverged { .. } => 3,
            LabError::Dependency { .. } => 4,
            _ => 1,
        }
    }
}
