use dgmr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("site error: {0}")]
    Site(String),
    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    Divergence {
        term: String,
        epoch: usize,
        batch: usize,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("metric input error: {0}")]
    Metric(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("out-of-order epoch: expected {expected}, got {got}")]
    EpochOrder { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
