use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor construction and expression evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An entry coordinate lies outside the declared shape.
    CoordOutOfBounds { dim: usize, coord: i64, extent: i64 },
    /// Number of level kinds (or entry coordinates) does not match the rank.
    RankMismatch { expected: usize, got: usize },
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch(String),
    /// A cost query lies outside `[0, total_cost]`.
    QueryOutOfRange { query: i64, total: i64 },
    /// The expression is malformed (binding order, modes, extents).
    InvalidExpression(String),
    /// The requested output format cannot be assembled in parallel.
    UnsupportedOutput(String),
    /// Requested more non-zeros than the shape can hold, or similar.
    InvalidArgument(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::CoordOutOfBounds { dim, coord, extent } => write!(
                f,
                "coordinate {coord} out of bounds for dimension {dim} with extent {extent}"
            ),
            Error::RankMismatch { expected, got } => {
                write!(f, "rank mismatch: expected {expected}, got {got}")
            }
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::QueryOutOfRange { query, total } => {
                write!(f, "cost query {query} outside [0, {total}]")
            }
            Error::InvalidExpression(msg) => write!(f, "invalid expression: {msg}"),
            Error::UnsupportedOutput(msg) => write!(f, "unsupported output format: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}
