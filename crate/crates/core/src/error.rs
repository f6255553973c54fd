use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fitting and classification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid correspondence: {0}")]
    InvalidCorrespondence(String),

    #[error("not a rotation matrix: {0}")]
    NotRotation(String),

    #[error("zero centered norm: model shape is degenerate")]
    ZeroCenteredNorm,

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("insufficient frames for statistics: need at least 2, got {0}")]
    InsufficientFrames(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate marginals: chance agreement is 1")]
    DegenerateMarginals,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
