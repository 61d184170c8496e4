use mdrnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("malformed binvox header: {0}")]
    BinvoxHeader(String),
    #[error("binvox run-length data decodes to {got} cells, expected {expected}")]
    BinvoxLength { expected: usize, got: usize },
    #[error("binvox value octet {0} is not 0 or 1")]
    BinvoxValue(u8),
    #[error("binvox run with zero count at byte {0}")]
    BinvoxZeroRun(usize),
    #[error("invalid grid dimensions {0:?}")]
    InvalidDims([usize; 3]),
    #[error("unknown shape class `{0}` (expected sphere, box, cross or pyramid)")]
    UnknownClass(String),
    #[error("k = {k} does not divide grid dimension {dim}; valid k: {valid:?}")]
    InvalidK { k: usize, dim: usize, valid: Vec<usize> },
    #[error("slice representation needs a cubic grid, got {0:?}")]
    NonCubic([usize; 3]),
    #[error("slice index {index} out of range for {count} slices")]
    SliceIndex { index: usize, count: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}{}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    NonFiniteLoss { epoch: u32, batch: Option<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Self::Format {
            what,
            message: message.into(),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
