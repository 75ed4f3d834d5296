use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("wrong number of inputs: {0}")]
    Arity(String),

    #[error("capability not available: {0}")]
    Capability(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("unsupported ablation: {0}")]
    Ablation(String),

    #[error("format error in `{module}`: {detail}")]
    Format { module: String, detail: String },

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(module: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            module: module.into(),
            detail: detail.into(),
        }
    }
}
