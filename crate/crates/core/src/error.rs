//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Contract violations and runtime failures.
///
/// Kernels treat non-finite values and shape mismatches as hard errors
/// rather than propagating NaN/Inf silently.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor extents do not satisfy the operation's shape contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// A kernel produced (or was handed) a NaN or infinity.
    NonFinite { op: &'static str },
    /// A softmax/attention query row has no unmasked key.
    FullyMaskedRow { row: usize },
    /// A precondition stated by an operation's contract was violated.
    Contract(String),
    /// A metric is undefined on the given input (e.g. single-class AUC).
    UndefinedMetric(String),
    /// Training produced a non-finite loss.
    Diverged(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            CoreError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            CoreError::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} has no unmasked entry")
            }
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            CoreError::Diverged(msg) => write!(f, "training diverged: {msg}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for CoreError {}
