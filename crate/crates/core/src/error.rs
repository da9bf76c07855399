use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid session {id}: {msg}")]
    InvalidSession { id: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for config key `{key}`")]
    BadValue { key: String, value: String },

    #[error("sequence of length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: u32, size: usize },

    #[error("invalid utterance span: {0}")]
    Span(String),

    #[error("state index {index} out of range for {num_states} states")]
    StateRange { index: usize, num_states: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("need at least 2 sessions to draw a negative, corpus has {0}")]
    InsufficientNegatives(usize),

    #[error("cosine similarity undefined for a zero-norm vector")]
    UndefinedCosine,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss { step: usize, batch_id: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("unknown parameter group `{0}`")]
    UnknownParamGroup(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid stochastic matrix: {0}")]
    Stochastic(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stdio(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
