use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the simulator core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violated a precondition.
    InvalidConfig(String),
    /// Vector lengths or parameter counts did not line up.
    DimensionMismatch { expected: usize, actual: usize },
    /// A serialized payload could not be decoded.
    MalformedPayload(String),
    /// The local optimizer produced a non-finite loss or gradient.
    Diverged { device: usize, round: usize },
    /// The gossip topology is not connected.
    DisconnectedTopology,
    /// A sweep grid exceeded the configured cell cap.
    GridCapExceeded { cells: usize, cap: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::DimensionMismatch { expected, actual } => {
                write!(f, "dimension mismatch: expected {expected}, got {actual}")
            }
            Error::MalformedPayload(msg) => write!(f, "malformed payload: {msg}"),
            Error::Diverged { device, round } => {
                write!(
                    f,
                    "optimizer diverged on device {device} at round {round} (non-finite loss or gradient)"
                )
            }
            Error::DisconnectedTopology => write!(f, "topology is not connected"),
            Error::GridCapExceeded { cells, cap } => {
                write!(f, "sweep grid has {cells} cells, exceeding the cap of {cap}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
