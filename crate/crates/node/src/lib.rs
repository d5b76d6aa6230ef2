//! Two-server private lookups over a Merkle-logged certificate store.
//!
//! The index server garbles, the data server evaluates; together they hold
//! the Circuit ORAM tree and position map in free-XOR label form and answer
//! each client with XOR shares of an inclusion proof and record.

pub mod bench;
pub mod client;
pub mod config;
pub mod dictionary;
pub mod engine;
pub mod error;
pub mod ingest;
pub mod labels;
pub mod layout;
pub mod local;
pub mod pools;
pub mod server;
pub mod session;
pub mod templates;
pub mod wire;

pub use error::NodeError;
