//! Placement of the Merkle log inside the ORAM address space.
//!
//! With log capacity `C` (a power of two, depth `h`), interior and leaf
//! levels `0..h` occupy block ids `[0, 2C)`, each level at an offset aligned
//! to its own size. Record `i` is split into `k` chunks of `D` bytes stored at
//! `(2 + c) * C + i`. A lookup touches one block per proof level and then
//! every chunk of the record, always in that order.

use oct_core::merkle::{CertificateRecord, Digest};
use oct_core::oram::OramParams;
use sha2::{Digest as _, Sha256};

use crate::NodeError;

/// Width of the client's index shares.
pub const INDEX_BITS: usize = 32;
/// leaf_index (4) and tree_size (4) in front of the proof nodes.
pub const BUNDLE_HEADER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub params: OramParams,
    pub capacity: u32,
    pub depth: u32,
    pub record_chunks: u32,
}

impl Layout {
    pub fn new(params: OramParams, record_chunks: u32) -> Result<Layout, NodeError> {
        let params = params.validated()?;
        if (params.payload_len as usize) < 32 {
            return Err(NodeError::Config("payload_len must hold a 32-byte digest".into()));
        }
        if record_chunks == 0 {
            return Err(NodeError::Config("record_chunks must be at least 1".into()));
        }
        if (record_chunks * params.payload_len) as usize <= 2 {
            return Err(NodeError::Config("record space too small".into()));
        }
        let slots = record_chunks as u64 + 2;
        let mut c = 1u64;
        while slots * c * 2 <= params.num_blocks as u64 {
            c *= 2;
        }
        if c < 2 || slots * c > params.num_blocks as u64 {
            return Err(NodeError::Config(format!(
                "N = {} too small for a log with {record_chunks} record chunks",
                params.num_blocks
            )));
        }
        Ok(Layout {
            params,
            capacity: c as u32,
            depth: c.trailing_zeros(),
            record_chunks,
        })
    }

    pub fn payload_len(&self) -> usize {
        self.params.payload_len as usize
    }

    pub fn leaf_bits(&self) -> usize {
        self.params.height() as usize
    }

    pub fn id_bits(&self) -> usize {
        self.params.id_bits() as usize
    }

    /// Slot encoding: valid bit, id, leaf, payload.
    pub fn slot_bits(&self) -> usize {
        1 + self.id_bits() + self.leaf_bits() + 8 * self.payload_len()
    }

    /// Slots fed to one path circuit: stash then buckets root to leaf.
    pub fn path_slots(&self) -> usize {
        self.params.path_slots()
    }

    pub fn level_offset(&self, level: u32) -> u32 {
        2 * self.capacity - 2 * (self.capacity >> level)
    }

    pub fn node_block(&self, level: u32, index: u32) -> u32 {
        self.level_offset(level) + index
    }

    pub fn chunk_block(&self, chunk: u32, leaf_index: u32) -> u32 {
        (2 + chunk) * self.capacity + leaf_index
    }

    /// Accesses per lookup.
    pub fn accesses(&self) -> usize {
        (self.depth + self.record_chunks) as usize
    }

    /// Block ids a lookup of `leaf_index` reads, in order.
    pub fn targets(&self, leaf_index: u32) -> Vec<u32> {
        let mut v: Vec<u32> = (0..self.depth)
            .map(|l| self.node_block(l, (leaf_index >> l) ^ 1))
            .collect();
        v.extend((0..self.record_chunks).map(|c| self.chunk_block(c, leaf_index)));
        v
    }

    /// Position map range scanned by access `t`: (first block id, log2 of length).
    pub fn access_range(&self, t: usize) -> (u32, u32) {
        let t = t as u32;
        if t < self.depth {
            (self.level_offset(t), self.depth - t)
        } else {
            ((2 + t - self.depth) * self.capacity, self.depth)
        }
    }

    pub fn record_space(&self) -> usize {
        (self.record_chunks as usize) * self.payload_len() - 2
    }

    pub fn bundle_len(&self) -> usize {
        BUNDLE_HEADER + self.depth as usize * 32 + self.record_chunks as usize * self.payload_len()
    }

    /// Record bytes as `k` payloads: u16 length, canonical record, zero padding.
    pub fn encode_record(&self, rec: &CertificateRecord) -> Result<Vec<Vec<u8>>, NodeError> {
        let bytes = rec.to_bytes();
        if bytes.len() > self.record_space() {
            return Err(NodeError::Config(format!(
                "record for {} is {} bytes, at most {} fit",
                rec.domain,
                bytes.len(),
                self.record_space()
            )));
        }
        let mut flat = (bytes.len() as u16).to_be_bytes().to_vec();
        flat.extend_from_slice(&bytes);
        flat.resize(self.record_chunks as usize * self.payload_len(), 0);
        Ok(flat.chunks(self.payload_len()).map(<[u8]>::to_vec).collect())
    }

    pub fn decode_record(&self, flat: &[u8]) -> Result<CertificateRecord, NodeError> {
        if flat.len() != self.record_chunks as usize * self.payload_len() {
            return Err(NodeError::Verification("record area has wrong length".into()));
        }
        let n = u16::from_be_bytes([flat[0], flat[1]]) as usize;
        if n > self.record_space() {
            return Err(NodeError::Verification("record length out of range".into()));
        }
        if flat[2 + n..].iter().any(|b| *b != 0) {
            return Err(NodeError::Verification("nonzero record padding".into()));
        }
        CertificateRecord::from_bytes(&flat[2..2 + n])
            .map_err(|e| NodeError::Verification(format!("record does not parse: {e}")))
    }

    pub fn node_payload(&self, d: &Digest) -> Vec<u8> {
        let mut p = d.0.to_vec();
        p.resize(self.payload_len(), 0);
        p
    }

    /// Digest of every parameter both servers must agree on.
    pub fn digest(&self) -> [u8; 32] {
        let p = &self.params;
        let mut h = Sha256::new();
        h.update(b"oct-layout-v1");
        for v in [
            p.num_blocks,
            p.bucket_size,
            p.payload_len,
            p.stash_capacity,
            p.evictions_per_access,
            self.record_chunks,
        ] {
            h.update(v.to_be_bytes());
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: u32) -> Layout {
        Layout::new(OramParams::new(n, 3, 32).unwrap(), 3).unwrap()
    }

    #[test]
    fn capacity_choice() {
        assert_eq!(layout(1024).capacity, 128);
        assert_eq!(layout(2048).capacity, 256);
        assert_eq!(layout(256).capacity, 32);
        assert!(Layout::new(OramParams::new(8, 3, 32).unwrap(), 3).is_err());
    }

    #[test]
    fn block_ids_are_disjoint_and_in_range() {
        let l = layout(1024);
        let mut seen = std::collections::HashSet::new();
        for lv in 0..l.depth {
            for j in 0..(l.capacity >> lv) {
                assert!(seen.insert(l.node_block(lv, j)));
            }
        }
        for c in 0..l.record_chunks {
            for i in 0..l.capacity {
                let b = l.chunk_block(c, i);
                assert!(b < 1024 && seen.insert(b));
            }
        }
        for t in 0..l.accesses() {
            let (start, bits) = l.access_range(t);
            assert_eq!(start % (1 << bits), 0);
            for i in [0, 5, l.capacity - 1] {
                let x = l.targets(i)[t];
                assert!(x >= start && x < start + (1 << bits));
            }
        }
    }

    #[test]
    fn record_roundtrip() {
        let l = layout(1024);
        let r = CertificateRecord::new("a.example", vec![7; 32], 5, 6).unwrap();
        let flat: Vec<u8> = l.encode_record(&r).unwrap().concat();
        assert_eq!(l.decode_record(&flat).unwrap(), r);
        let big = CertificateRecord::new("a.example", vec![7; 90], 5, 6).unwrap();
        assert!(l.encode_record(&big).is_err());
    }
}
