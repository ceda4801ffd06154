use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("bounding box {0:?} is inverted")]
    InvalidBox([f32; 4]),
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("{0}")]
    Data(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint is truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },
    #[error("checkpoint tensor {name}: manifest shape {manifest:?} does not match model shape {model:?}")]
    CheckpointShape {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("non-finite training loss at step {step}")]
    Diverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
