use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad FSEM header: {0}")]
    BadHeader(String),
    #[error("truncated FSEM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("FSEM payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite feature value in sample {sample} (feature {feature})")]
    NonFinite { sample: usize, feature: usize },
    #[error("negative feature value {value} in sample {sample} (feature {feature}) of a nonnegative store")]
    NegativeFeature { sample: usize, feature: usize, value: f32 },
    #[error("invalid store: {0}")]
    InvalidStore(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("zero-norm vector in cosine score")]
    ZeroNorm,
    #[error("negative value {0} where a nonnegative feature is required")]
    NegativeValue(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient classes: need {needed}, {available} eligible")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, needs {needed}")]
    InsufficientSamples {
        class: u32,
        needed: usize,
        available: usize,
    },
    #[error("too few score samples for {population}: {count} < {minimum}")]
    TooFewSamples {
        population: &'static str,
        count: usize,
        minimum: usize,
    },
    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("json error: {0}")]
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
