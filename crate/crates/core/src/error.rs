use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("identical attribute vectors have no description")]
    NoDifference,

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error("malformed manifest record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("invalid sequence {id}: {reason}")]
    InvalidSequence { id: String, reason: String },

    #[error("image decode error for {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("checkpoint: bad magic or unsupported version ({0})")]
    CheckpointVersion(String),

    #[error("checkpoint: truncated file ({0})")]
    CheckpointTruncated(String),

    #[error("checkpoint: unknown array `{0}`")]
    CheckpointUnknownArray(String),

    #[error("checkpoint: missing array `{0}`")]
    CheckpointMissingArray(String),

    #[error("checkpoint: array `{name}` has shape {got:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss in term {term}: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("json: {0}")]
    Json(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
