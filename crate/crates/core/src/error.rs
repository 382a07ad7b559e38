use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("image contains non-finite values")]
    NonFiniteImage,

    #[error("{channels} channels cannot be split into {groups} groups")]
    GroupDivisibility { channels: usize, groups: usize },

    #[error("{channels} channels are not divisible by SE reduction {reduction}")]
    ReductionDivisibility { channels: usize, reduction: usize },

    #[error("top-k: k = {k} outside 1..={levels}")]
    TopKOutOfRange { k: usize, levels: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown block kind: {0}")]
    UnknownBlock(String),

    #[error("empty mask: no valid pixels")]
    EmptyMask,

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("disparity field out of range: {0}")]
    FieldOutOfRange(String),

    #[error("negative epoch {0}")]
    NegativeEpoch(i64),

    #[error("non-finite loss at step {step} (batch {batch_id})")]
    NonFiniteLoss { step: u64, batch_id: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
