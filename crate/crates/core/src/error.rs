use thiserror::Error;

#[derive(Debug, Error)]
pub enum HxError {
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error("language spec error: {0}")]
    Spec(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label error: unknown tag {tag:?} at line {line}")]
    Label { line: usize, tag: String },
    #[error("vocabulary error: token id {id} outside vocabulary of {vocab}")]
    Vocabulary { id: u32, vocab: usize },
    #[error("truncation error: sequence of length {len} exceeds maximum {max}")]
    Truncation { len: usize, max: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("contamination: language {0} is held out from pretraining")]
    Contamination(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error("unknown source: {0}")]
    UnknownSource(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("join error: {0}")]
    Join(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HxError> = std::result::Result<T, E>;
