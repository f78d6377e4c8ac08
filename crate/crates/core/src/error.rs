use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A node produced a NaN or infinite value.
    #[error("non-finite value produced by {op} node #{node}")]
    NonFinite { node: usize, op: &'static str },

    /// The flow gradient became non-finite; carries the last state.
    #[error("non-finite gradient at flow time {}", .0.time)]
    NonFiniteFlow(Box<crate::dynamics::FlowState>),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cannot differentiate through {op} node #{node}")]
    Unsupported { node: usize, op: &'static str },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Refusal to run an O(n) Hessian oracle on a large model.
    #[error("parameter count {n} exceeds the exact-oracle guard of {limit}")]
    SizeGuard { n: usize, limit: usize },

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
