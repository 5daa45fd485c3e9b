use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (e.g. inverting a zero quaternion).
    #[error("domain error: {0}")]
    Domain(String),
    /// Input too close to a singular configuration to produce a meaningful result.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A documented precondition on the input did not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Caller misused an interface (shape mismatch, wrong mode, empty input).
    #[error("contract violation: {0}")]
    Contract(String),
    /// The model lacks an optional block needed by the operation.
    #[error("missing capability: {0}")]
    Capability(String),
    /// An equation has no admissible solution.
    #[error("no solution: {0}")]
    NoSolution(String),
    /// A file did not match the expected format or version.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
