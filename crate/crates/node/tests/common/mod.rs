#![allow(dead_code)]

use oct_core::merkle::CertificateRecord;
use oct_core::oram::OramParams;
use oct_node::ingest::{self, Ingested};
use oct_node::layout::Layout;
use oct_node::local::LocalPair;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn record(i: u32) -> CertificateRecord {
    CertificateRecord::new(
        &format!("site{i}.example.com"),
        (0..32).map(|k| (i as u8).wrapping_mul(31).wrapping_add(k)).collect(),
        1_700_000_000 + i as u64,
        1000 + i as u64,
    )
    .unwrap()
}

pub fn layout(n: u32) -> Layout {
    let p = OramParams::new(n, 3, 32).unwrap().with_stash(16).unwrap();
    Layout::new(p, 3).unwrap()
}

pub fn ingested(n: u32, records: u32, seed: u64) -> Ingested {
    let lay = layout(n);
    let recs: Vec<CertificateRecord> = (0..records).map(record).collect();
    ingest::build(&lay, &recs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn local_pair(n: u32, records: u32, seed: u64) -> (LocalPair, Ingested) {
    let ing = ingested(n, records, seed);
    let pair = LocalPair::new(ing.index.clone(), ing.data.clone(), ing.dictionary.clone(), seed).unwrap();
    (pair, ing)
}

pub fn config(n: u32) -> oct_node::config::NodeConfig {
    oct_node::config::NodeConfig {
        tree_capacity: n,
        stash_capacity: 16,
        precompute: false,
        seed: Some(11),
        ..Default::default()
    }
}

/// Start both servers on loopback and wait for the peer link.
pub fn start_pair(
    ing: &Ingested,
    cfg: &oct_node::config::NodeConfig,
) -> (oct_node::server::ServerHandle, oct_node::server::ServerHandle) {
    use oct_node::labels::Role;
    use oct_node::server::{ServerHandle, ServerOptions};
    let any = "127.0.0.1:0".parse().unwrap();
    let mut o = ServerOptions::new(cfg.clone(), Role::Index, any, None);
    o.trace = true;
    let index = ServerHandle::start(o, ing.index.clone()).unwrap();
    let mut o = ServerOptions::new(cfg.clone(), Role::Data, any, Some(index.addr));
    o.trace = true;
    let data = ServerHandle::start(o, ing.data.clone()).unwrap();
    data.wait_connected(std::time::Duration::from_secs(20)).unwrap();
    index.wait_connected(std::time::Duration::from_secs(20)).unwrap();
    (index, data)
}
