//! Error type shared across the crate.

use std::fmt;

/// Errors produced by tensor construction, recursions, oracles, training and
/// checkpoint IO.
#[derive(Debug)]
pub enum UbruError {
    /// Shape or length disagreement between inputs.
    Dimension(String),
    /// Input outside the mathematical domain of an operation.
    Domain(String),
    /// A NaN or infinite value where a finite one is required.
    NonFinite(String),
    /// Enumeration oracle refused a sequence longer than its hard limit.
    SequenceTooLong { len: usize, max: usize },
    /// Zero total likelihood at some timestep of the classical recursion.
    DegenerateEvidence { timestep: usize },
    /// Covariance factorization failed (matrix not symmetric positive definite).
    NotPositiveDefinite(String),
    /// Operation does not support the requested backward mode.
    UnsupportedMode(String),
    /// Training aborted on a non-finite loss.
    NonFiniteLoss { epoch: usize },
    /// Underlying IO failure.
    Io(std::io::Error),
    /// File contents could not be parsed as the expected format.
    MalformedFile(String),
    /// Checkpoint format version differs from the supported one.
    VersionMismatch { found: u32, supported: u32 },
    /// Checkpoint tensors disagree with the configuration they claim to match.
    ShapeInconsistency(String),
}

impl fmt::Display for UbruError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UbruError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            UbruError::Domain(msg) => write!(f, "domain error: {msg}"),
            UbruError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            UbruError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds enumeration limit {max}")
            }
            UbruError::DegenerateEvidence { timestep } => {
                write!(f, "zero total likelihood at timestep {timestep}")
            }
            UbruError::NotPositiveDefinite(msg) => {
                write!(f, "matrix not symmetric positive definite: {msg}")
            }
            UbruError::UnsupportedMode(msg) => write!(f, "unsupported mode: {msg}"),
            UbruError::NonFiniteLoss { epoch } => {
                write!(f, "training loss became non-finite at epoch {epoch}")
            }
            UbruError::Io(err) => write!(f, "io error: {err}"),
            UbruError::MalformedFile(msg) => write!(f, "malformed file: {msg}"),
            UbruError::VersionMismatch { found, supported } => {
                write!(
                    f,
                    "checkpoint version {found} not supported (expected {supported})"
                )
            }
            UbruError::ShapeInconsistency(msg) => {
                write!(f, "checkpoint shape inconsistency: {msg}")
            }
        }
    }
}

impl std::error::Error for UbruError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            UbruError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for UbruError {
    fn from(err: std::io::Error) -> Self {
        UbruError::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, UbruError>;
