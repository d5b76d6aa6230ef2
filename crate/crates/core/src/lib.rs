//! Core building blocks for two-server private certificate transparency
//! lookups: the Merkle log, a plaintext Circuit ORAM, and semi-honest 2PC
//! primitives (garbled circuits, oblivious transfer, commitments, sharing).

pub mod merkle;
pub mod mpc;
pub mod oram;
pub mod stats;
