//! Append-only Merkle log over certificate records.
//!
//! Hashing is SHA-256 with RFC 6962 style domain separation: leaves are
//! `H(0x00 || record)` and interior nodes `H(0x01 || left || right)`. The tree
//! is treated as padded to a power of two with [`Digest::empty`] leaves, so a
//! proof's length only depends on the padded size.

use std::fmt;
use std::io::BufRead;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const MAX_DOMAIN_LEN: usize = 253;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("log capacity {0} exceeded")]
    CapacityExceeded(u64),
    #[error("capacity must be a nonzero power of two, got {0}")]
    BadCapacity(u64),
    #[error("leaf index {index} out of range for tree size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// Digest of an absent leaf; also the root of an empty log.
    pub fn empty() -> Digest {
        Digest(Sha256::digest([]).into())
    }

    pub fn leaf(record_bytes: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update([0x00]);
        h.update(record_bytes);
        Digest(h.finalize().into())
    }

    pub fn node(left: &Digest, right: &Digest) -> Digest {
        let mut h = Sha256::new();
        h.update([0x01]);
        h.update(left.0);
        h.update(right.0);
        Digest(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let v = hex::decode(s.trim()).ok()?;
        Some(Digest(v.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Digest of an all-empty subtree of the given height.
pub fn empty_subtree(height: u32) -> Digest {
    let mut d = Digest::empty();
    for _ in 0..height {
        d = Digest::node(&d, &d);
    }
    d
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CertificateRecord {
    pub domain: String,
    pub public_key: Vec<u8>,
    pub issued_at: u64,
    pub serial: u64,
}

impl CertificateRecord {
    pub fn new(
        domain: &str,
        public_key: Vec<u8>,
        issued_at: u64,
        serial: u64,
    ) -> Result<Self, MerkleError> {
        let domain = domain.trim().to_ascii_lowercase();
        validate_domain(&domain)?;
        Ok(CertificateRecord {
            domain,
            public_key,
            issued_at,
            serial,
        })
    }

    /// Canonical encoding: length-prefixed fields in order, big-endian integers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.domain.len() + self.public_key.len());
        out.extend_from_slice(&(self.domain.len() as u32).to_be_bytes());
        out.extend_from_slice(self.domain.as_bytes());
        out.extend_from_slice(&(self.public_key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.public_key);
        out.extend_from_slice(&self.issued_at.to_be_bytes());
        out.extend_from_slice(&self.serial.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MerkleError> {
        let bad = |m: &str| MerkleError::InvalidRecord(m.to_string());
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8], MerkleError> {
            if rest.len() < n {
                return Err(bad("truncated record"));
            }
            let (a, b) = rest.split_at(n);
            rest = b;
            Ok(a)
        };
        let dlen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        if dlen > MAX_DOMAIN_LEN {
            return Err(bad("domain too long"));
        }
        let domain = std::str::from_utf8(take(dlen)?)
            .map_err(|_| bad("domain is not utf-8"))?
            .to_string();
        let klen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let public_key = take(klen)?.to_vec();
        let issued_at = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let serial = u64::from_be_bytes(take(8)?.try_into().unwrap());
        if !rest.is_empty() {
            return Err(bad("trailing bytes after record"));
        }
        validate_domain(&domain)?;
        if domain.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad("domain not lowercase"));
        }
        Ok(CertificateRecord {
            domain,
            public_key,
            issued_at,
            serial,
        })
    }

    pub fn leaf_digest(&self) -> Digest {
        Digest::leaf(&self.to_bytes())
    }

    /// One ingestion line: `domain,hex(public_key),issued_at,serial`.
    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(format!("expected 4 comma-separated fields, got {}", fields.len()));
        }
        let pk = hex::decode(fields[1]).map_err(|e| format!("bad public key hex: {e}"))?;
        let issued = fields[2]
            .parse::<u64>()
            .map_err(|e| format!("bad issued_at: {e}"))?;
        let serial = fields[3]
            .parse::<u64>()
            .map_err(|e| format!("bad serial: {e}"))?;
        CertificateRecord::new(fields[0], pk, issued, serial).map_err(|e| e.to_string())
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.domain,
            hex::encode(&self.public_key),
            self.issued_at,
            self.serial
        )
    }
}

fn validate_domain(domain: &str) -> Result<(), MerkleError> {
    if domain.is_empty() {
        return Err(MerkleError::InvalidRecord("empty domain".into()));
    }
    if domain.len() > MAX_DOMAIN_LEN {
        return Err(MerkleError::InvalidRecord(format!(
            "domain is {} bytes, limit {MAX_DOMAIN_LEN}",
            domain.len()
        )));
    }
    if domain.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(MerkleError::InvalidRecord(
            "domain contains whitespace or comma".into(),
        ));
    }
    Ok(())
}

/// Parse an ingestion stream. Blank lines and `#` comments are skipped; the
/// first bad line aborts with its 1-based line number.
pub fn parse_ingest<R: BufRead>(reader: R) -> Result<Vec<CertificateRecord>, MerkleError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MerkleError::Io(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let rec = CertificateRecord::parse_line(t).map_err(|reason| MerkleError::Parse {
            line: n + 1,
            reason,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: u32,
    pub index: u64,
}

impl NodeId {
    pub fn new(level: u32, index: u64) -> Self {
        NodeId { level, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// The sibling sits to the left of the running hash.
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub siblings: Vec<(Digest, Side)>,
}

/// Number of levels above the leaves once `size` is padded to a power of two.
pub fn tree_depth(size: u64) -> u32 {
    if size <= 1 {
        0
    } else {
        64 - (size - 1).leading_zeros()
    }
}

pub fn proof_node_ids(leaf_index: u64, tree_size: u64) -> Result<Vec<NodeId>, MerkleError> {
    if leaf_index >= tree_size {
        return Err(MerkleError::IndexOutOfRange {
            index: leaf_index,
            size: tree_size,
        });
    }
    Ok((0..tree_depth(tree_size))
        .map(|k| NodeId::new(k, (leaf_index >> k) ^ 1))
        .collect())
}

pub fn verify_proof(leaf: &Digest, proof: &InclusionProof, root: &Digest) -> bool {
    if proof.leaf_index >= proof.tree_size
        || proof.siblings.len() != tree_depth(proof.tree_size) as usize
    {
        return false;
    }
    let mut acc = *leaf;
    for (k, (sib, side)) in proof.siblings.iter().enumerate() {
        let is_right_child = (proof.leaf_index >> k) & 1 == 1;
        acc = match (side, is_right_child) {
            (Side::Left, true) => Digest::node(sib, &acc),
            (Side::Right, false) => Digest::node(&acc, sib),
            _ => return false,
        };
    }
    acc == *root
}

/// Merkle log with a fixed power-of-two capacity.
///
/// `levels[k][j]` stores every node whose subtree contains at least one real
/// leaf; anything else is an empty subtree and is computed on demand.
#[derive(Clone, Debug)]
pub struct MerkleLog {
    capacity: u64,
    levels: Vec<Vec<Digest>>,
    empties: Vec<Digest>,
}

impl MerkleLog {
    pub fn new(capacity: u64) -> Result<Self, MerkleError> {
        if capacity == 0 || !capacity.is_power_of_two() {
            return Err(MerkleError::BadCapacity(capacity));
        }
        let h = tree_depth(capacity);
        let mut empties = vec![Digest::empty()];
        for k in 0..h as usize {
            empties.push(Digest::node(&empties[k], &empties[k]));
        }
        Ok(MerkleLog {
            capacity,
            levels: vec![Vec::new(); h as usize + 1],
            empties,
        })
    }

    pub fn from_records(capacity: u64, records: &[CertificateRecord]) -> Result<Self, MerkleError> {
        let mut log = MerkleLog::new(capacity)?;
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn capacity_depth(&self) -> u32 {
        tree_depth(self.capacity)
    }

    pub fn size(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn append(&mut self, record: &CertificateRecord) -> Result<u64, MerkleError> {
        self.append_leaf(record.leaf_digest())
    }

    pub fn append_leaf(&mut self, leaf: Digest) -> Result<u64, MerkleError> {
        let i = self.size();
        if i >= self.capacity {
            return Err(MerkleError::CapacityExceeded(self.capacity));
        }
        self.levels[0].push(leaf);
        for k in 1..self.levels.len() {
            let j = (i >> k) as usize;
            let d = Digest::node(
                &self.get(k as u32 - 1, 2 * j as u64),
                &self.get(k as u32 - 1, 2 * j as u64 + 1),
            );
            let row = &mut self.levels[k];
            if j < row.len() {
                row[j] = d;
            } else {
                row.push(d);
            }
        }
        Ok(i)
    }

    /// Node digest within the capacity-padded tree.
    pub fn get(&self, level: u32, index: u64) -> Digest {
        match self.levels.get(level as usize).and_then(|r| r.get(index as usize)) {
            Some(d) => *d,
            None => self.empties[level as usize],
        }
    }

    /// Node digest with respect to the current (power-of-two padded) size.
    pub fn node(&self, id: NodeId) -> Option<Digest> {
        let depth = tree_depth(self.size());
        if id.level > depth || id.index >= (1u64 << (depth - id.level)) {
            return None;
        }
        Some(self.get(id.level, id.index))
    }

    /// Root over the current size padded to the next power of two.
    pub fn root(&self) -> Digest {
        if self.size() == 0 {
            return Digest::empty();
        }
        self.get(tree_depth(self.size()), 0)
    }

    /// Root of the full capacity-sized tree; what the servers publish.
    pub fn capacity_root(&self) -> Digest {
        self.get(self.capacity_depth(), 0)
    }

    pub fn inclusion_proof(&self, leaf_index: u64) -> Result<InclusionProof, MerkleError> {
        self.proof_for_size(leaf_index, self.size().next_power_of_two().max(1))
    }

    /// Proof against the capacity-padded root.
    pub fn capacity_proof(&self, leaf_index: u64) -> Result<InclusionProof, MerkleError> {
        self.proof_for_size(leaf_index, self.capacity)
    }

    fn proof_for_size(&self, leaf_index: u64, padded: u64) -> Result<InclusionProof, MerkleError> {
        if leaf_index >= self.size() {
            return Err(MerkleError::IndexOutOfRange {
                index: leaf_index,
                size: self.size(),
            });
        }
        let siblings = proof_node_ids(leaf_index, padded)?
            .into_iter()
            .map(|id| {
                let side = if id.index & 1 == 0 { Side::Left } else { Side::Right };
                (self.get(id.level, id.index), side)
            })
            .collect();
        Ok(InclusionProof {
            leaf_index,
            tree_size: padded,
            siblings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: u64) -> CertificateRecord {
        CertificateRecord::new(&format!("d{i}.example"), vec![i as u8; 4], 1000 + i, i).unwrap()
    }

    #[test]
    fn single_and_pair_roots() {
        let mut log = MerkleLog::new(8).unwrap();
        assert_eq!(log.root(), Digest::empty());
        assert_eq!(log.append(&rec(0)).unwrap(), 0);
        assert_eq!(log.root(), Digest::leaf(&rec(0).to_bytes()));
        log.append(&rec(1)).unwrap();
        let expect = Digest::node(&rec(0).leaf_digest(), &rec(1).leaf_digest());
        assert_eq!(log.root(), expect);
    }

    #[test]
    fn capacity_enforced() {
        let mut log = MerkleLog::new(2).unwrap();
        log.append(&rec(0)).unwrap();
        log.append(&rec(1)).unwrap();
        assert_eq!(log.append(&rec(2)), Err(MerkleError::CapacityExceeded(2)));
        assert!(MerkleLog::new(3).is_err());
    }

    #[test]
    fn proof_ids_examples() {
        assert_eq!(proof_node_ids(0, 2).unwrap(), vec![NodeId::new(0, 1)]);
        assert_eq!(
            proof_node_ids(5, 8).unwrap(),
            vec![NodeId::new(0, 4), NodeId::new(1, 3), NodeId::new(2, 0)]
        );
        assert!(proof_node_ids(0, 1).unwrap().is_empty());
        assert!(proof_node_ids(8, 8).is_err());
    }

    #[test]
    fn empty_proof_single_leaf() {
        let mut log = MerkleLog::new(4).unwrap();
        log.append(&rec(7)).unwrap();
        let p = log.inclusion_proof(0).unwrap();
        assert!(p.siblings.is_empty());
        assert!(verify_proof(&rec(7).leaf_digest(), &p, &log.root()));
    }

    #[test]
    fn record_roundtrip_and_line() {
        let r = CertificateRecord::new("Example.COM", vec![1, 2, 3], 5, 6).unwrap();
        assert_eq!(r.domain, "example.com");
        assert_eq!(CertificateRecord::from_bytes(&r.to_bytes()).unwrap(), r);
        assert_eq!(CertificateRecord::parse_line(&r.to_line()).unwrap(), r);
        assert!(CertificateRecord::new("", vec![], 0, 0).is_err());
        assert!(CertificateRecord::new(&"a".repeat(254), vec![], 0, 0).is_err());
    }

    #[test]
    fn ingest_reports_line() {
        let text = "a.com,00,1,2\n\nb.com,zz,1,2\n";
        match parse_ingest(text.as_bytes()) {
            Err(MerkleError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn capacity_root_matches_padded_fold() {
        let mut log = MerkleLog::new(16).unwrap();
        for i in 0..5 {
            log.append(&rec(i)).unwrap();
        }
        let p = log.capacity_proof(3).unwrap();
        assert_eq!(p.siblings.len(), 4);
        assert!(verify_proof(&rec(3).leaf_digest(), &p, &log.capacity_root()));
        let mut full = log.leaves().to_vec();
        full.resize(16, Digest::empty());
        while full.len() > 1 {
            full = full.chunks(2).map(|c| Digest::node(&c[0], &c[1])).collect();
        }
        assert_eq!(full[0], log.capacity_root());
        assert_eq!(empty_subtree(2), log.get(2, 3));
    }
}
