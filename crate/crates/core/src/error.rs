use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dataset is not eligible: {0}")]
    Ineligible(String),

    #[error("non-finite log posterior at initial state of chain {chain}")]
    NonFiniteInitialState { chain: usize },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
