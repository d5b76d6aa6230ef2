use oct_core::merkle::MerkleError;
use oct_core::mpc::MpcError;
use oct_core::oram::OramError;
use thiserror::Error;

use crate::wire::RejectReason;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer connection closed")]
    PeerClosed,
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("2PC: {0}")]
    Mpc(#[from] MpcError),
    #[error("ORAM: {0}")]
    Oram(#[from] OramError),
    #[error("merkle log: {0}")]
    Merkle(#[from] MerkleError),
    #[error("state corruption: {0}")]
    State(String),
    #[error("verification failure: {0}")]
    Verification(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("request rejected: {0}")]
    Rejected(RejectReason),
    #[error("timed out")]
    Timeout,
}

impl NodeError {
    /// Process exit code for CLI front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            NodeError::Config(_)
            | NodeError::UnknownDomain(_)
            | NodeError::Merkle(_)
            | NodeError::ParamMismatch(_) => 1,
            NodeError::Io(_)
            | NodeError::Frame(_)
            | NodeError::Protocol(_)
            | NodeError::PeerClosed
            | NodeError::Timeout
            | NodeError::Rejected(_) => 2,
            NodeError::Verification(_) => 3,
            NodeError::State(_) | NodeError::Mpc(_) | NodeError::Oram(_) => 4,
        }
    }
}
