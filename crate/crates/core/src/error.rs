use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not match the operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Geometry too degenerate to triangulate or warp (e.g. collinear
    /// landmarks).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input outside the operation's domain (empty batch, single-class
    /// evaluation set, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough data to compute batch statistics.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Malformed file contents.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
