use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid label {label}: not registered in the classifier head")]
    InvalidLabel { label: u32 },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("numeric divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("degenerate imprint: mean shot embedding has near-zero norm ({norm:e})")]
    DegenerateImprint { norm: f64 },

    #[error("stream integrity: {0}")]
    StreamIntegrity(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
