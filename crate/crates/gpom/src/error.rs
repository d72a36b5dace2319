//! Error type shared across the library.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, GpomError>;

/// Errors emitted by the tensor engine, benchmarks, model, and training loop.
#[derive(Debug, Clone, PartialEq)]
pub enum GpomError {
    /// Two operands (or an operand and a parameter) have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A tensor constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// An operation produced or received a non-finite value.
    NonFinite { op: &'static str },
    /// Division guard: a divisor entry fell below the minimum magnitude.
    DivisionGuard { op: &'static str, magnitude: f64 },
    /// An operation's contract was violated (e.g. backward on a non-scalar root).
    Contract { op: &'static str, msg: String },
    /// A configuration value is invalid or inconsistent.
    InvalidConfig(String),
    /// A checkpoint could not be parsed or has an unsupported format version.
    Checkpoint(String),
    /// Filesystem or serialization failure.
    Io(String),
}

impl fmt::Display for GpomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GpomError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            GpomError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} expected)")
            }
            GpomError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            GpomError::DivisionGuard { op, magnitude } => {
                write!(f, "{op}: divisor magnitude {magnitude:e} below guard")
            }
            GpomError::Contract { op, msg } => write!(f, "{op}: {msg}"),
            GpomError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            GpomError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            GpomError::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for GpomError {}

impl From<std::io::Error> for GpomError {
    fn from(e: std::io::Error) -> Self {
        GpomError::Io(e.to_string())
    }
}
