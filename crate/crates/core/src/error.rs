use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("singular system in {ctx} ({detail})")]
    Singular { ctx: &'static str, detail: String },

    #[error("guard precondition violated: {0}")]
    GuardPrecondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("certificate hypothesis not met: {0}")]
    Hypothesis(String),

    #[error("malformed log: {0}")]
    MalformedLog(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
