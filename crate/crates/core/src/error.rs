use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("empty loss: the loss mask selects no positions")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step} ({stream}): {reason}")]
    Training {
        step: usize,
        stream: String,
        reason: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config mismatch on {field}: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parameter registry error: {0}")]
    Registry(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
