use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("batch-norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("label row {row} is not one-hot")]
    MalformedLabel { row: usize },

    #[error("schedule needs {needed} patches but only {available} are available")]
    InsufficientPatches { needed: usize, available: usize },

    #[error("non-finite loss at streak {streak}, shard {shard}, epoch {epoch}, batch {batch}")]
    Divergence {
        streak: usize,
        shard: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: failed to decode image: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("{}: unsupported image format", path.display())]
    UnsupportedFormat { path: PathBuf },

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
