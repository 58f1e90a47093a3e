use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at block `{block}`: {detail}")]
    ShapeMismatch { block: String, detail: String },

    #[error("block count mismatch: expected {expected}, found {found}")]
    BlockCount { expected: usize, found: usize },

    #[error("invalid block shape `{name}`: {reason}")]
    InvalidShape { name: String, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("no scaling coefficient keeps control accuracy >= {floor:.4} (best control accuracy {best:.4})")]
    NoFeasibleAlpha { floor: f64, best: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
