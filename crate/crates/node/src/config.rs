//! Flat `key = value` configuration shared by the binaries.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use oct_core::oram::OramParams;

use crate::labels::Role;
use crate::layout::Layout;
use crate::NodeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub max_batch: usize,
    pub max_wait: Duration,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            max_batch: 1,
            max_wait: Duration::from_millis(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub role: Option<Role>,
    pub listen: Option<String>,
    pub peer: Option<String>,
    pub servers: Vec<String>,
    pub tree_capacity: u32,
    pub bucket_size: u32,
    pub payload_len: u32,
    pub stash_capacity: u32,
    pub evictions_per_access: u32,
    pub record_chunks: u32,
    pub batch: BatchConfig,
    pub pool_exponentiations: usize,
    pub pool_circuits: usize,
    pub pool_threads: usize,
    pub pipeline: bool,
    pub precompute: bool,
    pub seed: Option<u64>,
    pub state_dir: PathBuf,
    /// Snapshot after this many batches; 0 only snapshots on shutdown.
    pub snapshot_every: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            role: None,
            listen: None,
            peer: None,
            servers: Vec::new(),
            tree_capacity: 2048,
            bucket_size: 3,
            payload_len: 32,
            stash_capacity: 16,
            evictions_per_access: 2,
            record_chunks: 3,
            batch: BatchConfig::default(),
            pool_exponentiations: 512,
            pool_circuits: 100,
            pool_threads: 1,
            pipeline: true,
            precompute: true,
            seed: None,
            state_dir: PathBuf::from("state"),
            snapshot_every: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, NodeError> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(NodeError::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, NodeError> {
    v.parse()
        .map_err(|_| NodeError::Config(format!("{key}: not a number: {v:?}")))
}

impl NodeConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), NodeError> {
        match key {
            "role" => self.role = Some(v.parse()?),
            "listen" => self.listen = Some(v.to_string()),
            "peer" => self.peer = Some(v.to_string()),
            "servers" => {
                self.servers = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "tree_capacity" => self.tree_capacity = parse_num(key, v)?,
            "bucket_size" => self.bucket_size = parse_num(key, v)?,
            "payload_len" => self.payload_len = parse_num(key, v)?,
            "stash_capacity" => self.stash_capacity = parse_num(key, v)?,
            "evictions_per_access" => self.evictions_per_access = parse_num(key, v)?,
            "record_chunks" => self.record_chunks = parse_num(key, v)?,
            "batch_max" => {
                self.batch.max_batch = parse_num(key, v)?;
                if self.batch.max_batch == 0 {
                    return Err(NodeError::Config("batch_max must be at least 1".into()));
                }
            }
            "batch_wait_ms" => self.batch.max_wait = Duration::from_millis(parse_num(key, v)?),
            "pool_exponentiations" => self.pool_exponentiations = parse_num(key, v)?,
            "pool_circuits" => self.pool_circuits = parse_num(key, v)?,
            "pool_threads" => self.pool_threads = parse_num(key, v)?,
            "pipeline" => self.pipeline = parse_bool(key, v)?,
            "precompute" => self.precompute = parse_bool(key, v)?,
            "seed" => self.seed = Some(parse_num(key, v)?),
            "state_dir" => self.state_dir = PathBuf::from(v),
            "snapshot_every" => self.snapshot_every = parse_num(key, v)?,
            _ => return Err(NodeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<NodeConfig, NodeError> {
        let mut c = NodeConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NodeError::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| NodeError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<NodeConfig, NodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NodeError::Config(format!("cannot read {}: {e}", path.display())))?;
        NodeConfig::parse(&text)
    }

    pub fn layout(&self) -> Result<Layout, NodeError> {
        let p = OramParams::new(self.tree_capacity, self.bucket_size, self.payload_len)
            .and_then(|p| p.with_stash(self.stash_capacity))
            .and_then(|p| p.with_evictions(self.evictions_per_access))
            .map_err(|e| NodeError::Config(e.to_string()))?;
        Layout::new(p, self.record_chunks)
    }

    /// Seed bytes for one role, random when no seed is configured.
    pub fn role_seed(&self, role: Role) -> [u8; 32] {
        let mut s = [0u8; 32];
        match self.seed {
            Some(v) => {
                s[..8].copy_from_slice(&v.to_be_bytes());
                s[31] = role.as_u8();
            }
            None => rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut s),
        }
        s
    }
}

pub fn resolve(addr: &str) -> Result<SocketAddr, NodeError> {
    addr.to_socket_addrs()
        .map_err(|e| NodeError::Config(format!("cannot resolve {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| NodeError::Config(format!("{addr:?} resolves to nothing")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = NodeConfig::parse("# comment\nrole = data\ntree_capacity=1024\npipeline = off\nbatch_max = 4\n").unwrap();
        assert_eq!(c.role, Some(Role::Data));
        assert_eq!(c.tree_capacity, 1024);
        assert!(!c.pipeline);
        assert_eq!(c.batch.max_batch, 4);
        c.set("tree_capacity", "2048").unwrap();
        assert_eq!(c.layout().unwrap().capacity, 256);
        assert!(NodeConfig::parse("bogus = 1").is_err());
        assert!(NodeConfig::parse("batch_max = 0").is_err());
        assert!(NodeConfig::parse("pipeline = maybe").is_err());
    }
}
