use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("task {0} is not registered")]
    TaskNotRegistered(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("sample has an empty loss mask")]
    DegenerateSample,

    #[error("unknown token {0:?} (not in the tokenizer alphabet)")]
    UnknownToken(char),

    #[error("raw text contains the reserved placeholder {0:?}")]
    Escaping(String),

    #[error("task {task} already belongs to cluster {cluster:?}")]
    RegistryConflict { task: usize, cluster: String },

    #[error("unknown cluster {0:?}")]
    UnknownCluster(String),

    #[error("non-finite loss at step {}: {}", .0.step, .0)]
    NonFinite(Box<crate::trainer::Diagnostics>),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
