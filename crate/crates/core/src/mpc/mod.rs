//! Semi-honest two-party computation building blocks.

mod builder;
mod circuit;
mod commit;
mod garble;
mod ot;
mod pool;
mod share;

pub use builder::{Bit, CircuitBuilder};
pub use circuit::{BoolCircuit, Gate, GateOp};
pub use commit::{commit, verify_commitment, Commitment};
pub use garble::{
    decode, evaluate, garble, garble_with, Delta, GarbledCircuit, GarbledOutput, WireLabel,
    AND_ROW_BYTES, AND_TABLE_BYTES,
};
pub use ot::{ot_transfer, ExpPair, OtMessage, OtReceiver, OtSender, OtSenderSetup};
pub use pool::{Maker, Pool, PoolKind, Pooled, PrecomputePool};
pub use share::{share_combine, share_split, Share};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MpcError {
    #[error("malformed circuit: {0}")]
    MalformedCircuit(String),
    #[error("circuit parse error at line {line}: {reason}")]
    CircuitParse { line: usize, reason: String },
    #[error("expected {expected} input labels, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("invalid label at AND gate {gate}: authenticity tag mismatch")]
    InvalidLabel { gate: usize },
    #[error("garbled table has {got} bytes, expected {expected}")]
    TableSize { expected: usize, got: usize },
    #[error("share length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid group element")]
    BadGroupElement,
    #[error("oblivious transfer: {0}")]
    Ot(String),
}
