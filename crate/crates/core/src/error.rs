use std::path::PathBuf;

use crate::data::ActionClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("sample too long: {frames} frames exceeds padded length {target}")]
    SampleTooLong { frames: usize, target: usize },

    #[error("insufficient frames: {num_frames} frames cannot hold one {clip_len}-frame clip at offset {max_offset}")]
    InsufficientFrames {
        num_frames: usize,
        clip_len: usize,
        max_offset: usize,
    },

    #[error("degenerate action {action}: {reason}")]
    DegenerateAction { action: ActionClass, reason: String },

    #[error("unknown action `{0}` (valid: {valid})", valid = ActionClass::valid_names())]
    UnknownAction(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("sample `{id}`: score {score} outside {action} range [{min}, {max}]")]
    ScoreOutOfRange {
        id: String,
        action: ActionClass,
        score: f64,
        min: f64,
        max: f64,
    },

    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate metric input: {0}")]
    DegenerateMetric(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient samples for {action}: need {needed}, have {available}")]
    InsufficientSamples {
        action: ActionClass,
        needed: usize,
        available: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
