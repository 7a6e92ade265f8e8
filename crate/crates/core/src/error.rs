use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{what} {index} out of range (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("cannot corrupt an incidence matrix with {0} row(s)")]
    Corruption(usize),

    #[error("non-finite value in {0}")]
    Overflow(String),

    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,

    #[error("data error: {0}")]
    Data(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
