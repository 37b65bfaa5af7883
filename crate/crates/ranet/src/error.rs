use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural problem: invalid shapes, invalid architecture description,
    /// or an operation applied to tensors it cannot accept.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data: labels out of range, malformed dataset files, wrong
    /// input resolution at inference time.
    #[error("data error: {0}")]
    Data(String),

    /// API misuse: out-of-range classifier index, non-scalar loss, missing
    /// checkpoint for a verb that needs one.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed on-disk format (dataset file, checkpoint, config file).
    #[error("format error: {0}")]
    Format(String),

    /// The requested compute budget is below the cheapest classifier.
    #[error("infeasible budget: requested {requested} MACs, minimum achievable is {minimum}")]
    InfeasibleBudget { requested: u64, minimum: u64 },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
