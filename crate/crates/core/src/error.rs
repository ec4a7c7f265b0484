use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the association pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: field {field} out of range: {value}")]
    OutOfRange {
        line: u64,
        field: &'static str,
        value: String,
    },

    #[error("missing or invalid CSV header: {0}")]
    BadHeader(String),

    #[error("track {vessel_id} too short: {len} samples, need {needed}")]
    TrackTooShort {
        vessel_id: String,
        len: usize,
        needed: usize,
    },

    #[error("split of {w} test samples leaves nothing to train on (series length {n})")]
    SplitTooLarge { n: usize, w: usize },

    #[error("non-finite activation in layer {layer} at timestep {step}")]
    NonFiniteActivation { layer: usize, step: usize },

    #[error("cache does not match network: {0}")]
    CacheMismatch(String),

    #[error(
        "observation time {time} is not after training end {train_end} for vessel {vessel_id}"
    )]
    TimeBeforeTraining {
        vessel_id: String,
        time: String,
        train_end: String,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("object id {0} has no ground-truth label")]
    UnknownObjectId(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
