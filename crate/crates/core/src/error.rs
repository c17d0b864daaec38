use thiserror::Error;

/// Errors surfaced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text (TNTP files, expansion CSV, experiment configs).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally well-formed input that violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// No path exists between an origin-destination pair.
    #[error("no path from node {origin} to node {destination}")]
    Disconnected { origin: usize, destination: usize },

    /// Dimension or block-structure mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced non-finite values or failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
