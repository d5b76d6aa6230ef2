//! Tree snapshot: magic `ORAM`, then little-endian header fields
//! (version, N, Z, D, L, stash capacity, evictions per access, schedule
//! counter, access count, max stash), buckets in level order, then the stash.

use super::{Block, Bucket, OramError, OramParams, OramTree, PositionMap};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"ORAM";
pub const SNAPSHOT_VERSION: u32 = 1;
const POSMAP_MAGIC: &[u8; 4] = b"OPOS";

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], OramError> {
        if self.buf.len() < n {
            return Err(OramError::Snapshot("truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, OramError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, OramError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self, d: usize) -> Result<Block, OramError> {
        let id = self.u32()?;
        let leaf = self.u32()?;
        Ok(Block {
            id,
            leaf,
            payload: self.take(d)?.to_vec(),
        })
    }
}

impl OramTree {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let d = p.payload_len as usize;
        let mut out = Vec::with_capacity(64 + p.total_slots() * Block::encoded_len(d));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        for v in [
            SNAPSHOT_VERSION,
            p.num_blocks,
            p.bucket_size,
            p.payload_len,
            p.height(),
            p.stash_capacity,
            p.evictions_per_access,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.evict_counter.to_le_bytes());
        out.extend_from_slice(&self.accesses.to_le_bytes());
        out.extend_from_slice(&self.max_stash.to_le_bytes());
        for b in &self.buckets {
            for s in &b.slots {
                s.encode(&mut out);
            }
        }
        for s in &self.stash {
            s.encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<OramTree, OramError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(OramError::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(OramError::Snapshot(format!("unsupported version {version}")));
        }
        let (n, z, d, l) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let (stash, ev) = (r.u32()?, r.u32()?);
        let params = OramParams {
            num_blocks: n,
            bucket_size: z,
            payload_len: d,
            stash_capacity: stash,
            evictions_per_access: ev,
        }
        .validated()
        .map_err(|e| OramError::Snapshot(e.to_string()))?;
        if params.height() != l {
            return Err(OramError::Snapshot("height does not match N".into()));
        }
        let evict_counter = r.u64()?;
        let accesses = r.u64()?;
        let max_stash = r.u32()?;
        let d = d as usize;
        let expected = params.total_slots() * Block::encoded_len(d);
        if r.buf.len() != expected {
            return Err(OramError::Snapshot(format!(
                "body is {} bytes, expected {expected}",
                r.buf.len()
            )));
        }
        let mut buckets = Vec::with_capacity(params.num_buckets());
        for _ in 0..params.num_buckets() {
            let slots = (0..z).map(|_| r.block(d)).collect::<Result<_, _>>()?;
            buckets.push(Bucket { slots });
        }
        let stash = (0..stash).map(|_| r.block(d)).collect::<Result<_, _>>()?;
        Ok(OramTree {
            params,
            buckets,
            stash,
            evict_counter,
            accesses,
            max_stash,
        })
    }
}

impl PositionMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.entries.len());
        out.extend_from_slice(POSMAP_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PositionMap, OramError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != POSMAP_MAGIC {
            return Err(OramError::Snapshot("bad position map magic".into()));
        }
        let n = r.u32()? as usize;
        if r.buf.len() != 4 * n {
            return Err(OramError::Snapshot("position map length".into()));
        }
        let entries = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
        Ok(PositionMap { entries })
    }
}
