use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("convergence failure after {iterations} iterations (deviation {deviation:.3e})")]
    ConvergenceFailure { iterations: usize, deviation: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("no route for mode {0}")]
    NoRoute(String),

    #[error("empty option set: {0}")]
    EmptyOptionSet(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }
}
