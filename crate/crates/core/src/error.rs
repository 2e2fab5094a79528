use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid float format: {0}")]
    InvalidFormat(String),
    #[error("value {0} is not representable in the target format")]
    NotRepresentable(f64),
    #[error("value {0} is subnormal; this operation requires a normal input")]
    SubnormalInput(f64),
    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {0} out of range for vocabulary of size {1}")]
    TokenOutOfRange(usize, usize),
    #[error("NaN encountered in {0}; aborting")]
    NumericalAbort(String),
    #[error("stale or already-consumed tape")]
    StaleTape,

    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("embedding init: {0}")]
    EmbeddingInit(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("planner: {0}")]
    Planner(String),
    #[error("corpus line {line}: {msg}")]
    CorpusFormat { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
