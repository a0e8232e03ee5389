use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QicaError {
    #[error("unknown word {0:?} (closed vocabulary)")]
    UnknownWord(String),
    #[error("text has {len} tokens but the encoder holds at most {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("inference text must not contain a number token, found {0:?}")]
    NumberInInferenceText(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("quantity {q} outside the embedding range 0..={max}")]
    QuantityOutOfRange { q: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("could not place {count} instances after {attempts} attempts")]
    InfeasiblePacking { count: usize, attempts: usize },
    #[error("resolution mismatch: {0}")]
    Resolution(String),
    #[error("malformed density file: {0}")]
    Qdm(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; batch dumped to {dump:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = QicaError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> QicaError {
    let path = path.into();
    move |source| QicaError::Io { path, source }
}
