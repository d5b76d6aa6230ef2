//! Server state in label form.
//!
//! Every stored bit `b` exists as a pair: the index server keeps a zero label
//! `Z` and the global offset `Δ`, the data server keeps the active label
//! `Z ^ bΔ`. Since `Δ` has its low bit set, the low bits of the two labels are
//! XOR shares of `b`. Tree slots are ordered as `SlotLocator::global`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use oct_core::merkle::Digest;
use oct_core::mpc::Delta;
use oct_core::oram::{Block, OramParams, OramTree, PositionMap, SlotLocator};
use rand::{Rng, RngCore};
use sha2::{Digest as _, Sha256};

use crate::layout::Layout;
use crate::templates::{decode_slot, encode_slot};
use crate::wire::Reader;
use crate::NodeError;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"OCTS";
pub const SNAPSHOT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Evaluator and OT receiver; stores active labels.
    Data,
    /// Garbler, OT sender and batch leader; stores zero labels and `Δ`.
    Index,
}

impl Role {
    pub fn as_u8(self) -> u8 {
        match self {
            Role::Data => 1,
            Role::Index => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Role> {
        match v {
            1 => Some(Role::Data),
            2 => Some(Role::Index),
            _ => None,
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::Data => Role::Index,
            Role::Index => Role::Data,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Data => "data",
            Role::Index => "index",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = NodeError;
    fn from_str(s: &str) -> Result<Role, NodeError> {
        match s {
            "data" => Ok(Role::Data),
            "index" => Ok(Role::Index),
            _ => Err(NodeError::Config(format!("unknown role {s:?} (data|index)"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct LabelState {
    pub role: Role,
    pub layout: Layout,
    /// Present on the index server only.
    pub delta: Option<Delta>,
    /// Completed batches.
    pub epoch: u64,
    pub evict_counter: u64,
    pub accesses: u64,
    /// Sessions processed, allowed or denied; keys per-session randomness.
    pub sessions: u64,
    /// Number of records in the log.
    pub size: u32,
    /// Root of the capacity-padded log.
    pub root: Digest,
    pub tree: Vec<u128>,
    pub posmap: Vec<u128>,
}

impl std::fmt::Debug for LabelState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelState")
            .field("role", &self.role)
            .field("epoch", &self.epoch)
            .field("size", &self.size)
            .field("root", &self.root.to_hex())
            .finish_non_exhaustive()
    }
}

/// Encode a plaintext tree and position map as a matching pair of states
/// (index, data).
pub fn encode_pair<R: RngCore + ?Sized>(
    layout: &Layout,
    tree: &OramTree,
    posmap: &PositionMap,
    size: u32,
    root: Digest,
    rng: &mut R,
) -> (LabelState, LabelState) {
    let delta = Delta::random(rng);
    let d = delta.value();
    let p = &layout.params;
    let mut bits = Vec::with_capacity(p.total_slots() * layout.slot_bits());
    for g in 0..p.total_slots() {
        bits.extend(encode_slot(layout, tree.slot(SlotLocator::from_global(g, p)).unwrap()));
    }
    let h = layout.leaf_bits();
    let pbits: Vec<bool> = posmap
        .entries
        .iter()
        .flat_map(|e| (0..h).map(move |i| (e >> i) & 1 == 1))
        .collect();
    let mut split = |bits: &[bool]| -> (Vec<u128>, Vec<u128>) {
        let zero: Vec<u128> = (0..bits.len()).map(|_| rng.gen()).collect();
        let active = zero.iter().zip(bits).map(|(z, b)| if *b { z ^ d } else { *z }).collect();
        (zero, active)
    };
    let (tz, ta) = split(&bits);
    let (pz, pa) = split(&pbits);
    let base = LabelState {
        role: Role::Index,
        layout: *layout,
        delta: Some(delta),
        epoch: 0,
        evict_counter: tree.evict_counter,
        accesses: tree.accesses,
        sessions: 0,
        size,
        root,
        tree: tz,
        posmap: pz,
    };
    let data = LabelState {
        role: Role::Data,
        delta: None,
        tree: ta,
        posmap: pa,
        ..base.clone()
    };
    (base, data)
}

/// Recombine both states into plaintext (tests and audits only).
pub fn decode_pair(index: &LabelState, data: &LabelState) -> Result<(OramTree, PositionMap), NodeError> {
    let lay = &index.layout;
    if index.role != Role::Index || data.role != Role::Data || data.layout != *lay {
        return Err(NodeError::State("state pair does not match".into()));
    }
    let d = index.delta.ok_or_else(|| NodeError::State("index state lacks delta".into()))?.value();
    let bit = |z: &u128, a: &u128| -> Result<bool, NodeError> {
        match z ^ a {
            0 => Ok(false),
            x if x == d => Ok(true),
            _ => Err(NodeError::State("label is neither zero nor one label".into())),
        }
    };
    let p = lay.params;
    let sb = lay.slot_bits();
    let mut tree = OramTree::new(p);
    for g in 0..p.total_slots() {
        let bits = index.tree[g * sb..(g + 1) * sb]
            .iter()
            .zip(&data.tree[g * sb..(g + 1) * sb])
            .map(|(z, a)| bit(z, a))
            .collect::<Result<Vec<bool>, _>>()?;
        *tree.slot_mut(SlotLocator::from_global(g, &p)).unwrap() = decode_slot(lay, &bits);
    }
    tree.evict_counter = index.evict_counter;
    tree.accesses = index.accesses;
    let h = lay.leaf_bits();
    let mut entries = Vec::with_capacity(p.num_blocks as usize);
    for id in 0..p.num_blocks as usize {
        let mut v = 0u32;
        for i in 0..h {
            if bit(&index.posmap[id * h + i], &data.posmap[id * h + i])? {
                v |= 1 << i;
            }
        }
        entries.push(v);
    }
    Ok((tree, PositionMap { entries }))
}

/// Plaintext tree with dummy slot contents cleared, for comparisons: the 2PC
/// leaves stale bits behind in slots whose valid bit is off.
pub fn normalized(tree: &OramTree) -> OramTree {
    let mut t = tree.clone();
    let d = t.params.payload_len as usize;
    for b in t.stash.iter_mut().chain(t.buckets.iter_mut().flat_map(|b| b.slots.iter_mut())) {
        if b.is_dummy() {
            *b = Block::dummy(d);
        }
    }
    t.max_stash = 0;
    t
}

/// Uncommitted writes of the batch in progress.
#[derive(Clone, Debug, Default)]
pub struct Overlay {
    pub slots: BTreeMap<usize, Vec<u128>>,
    pub posmap: BTreeMap<u32, Vec<u128>>,
    pub evict_counter: u64,
    pub accesses: u64,
    pub sessions: u64,
}

impl LabelState {
    pub fn overlay(&self) -> Overlay {
        Overlay {
            evict_counter: self.evict_counter,
            accesses: self.accesses,
            sessions: self.sessions,
            ..Default::default()
        }
    }

    pub fn read_slots(&self, ov: &Overlay, slots: &[usize]) -> Vec<u128> {
        let sb = self.layout.slot_bits();
        let mut out = Vec::with_capacity(slots.len() * sb);
        for g in slots {
            match ov.slots.get(g) {
                Some(v) => out.extend_from_slice(v),
                None => out.extend_from_slice(&self.tree[g * sb..(g + 1) * sb]),
            }
        }
        out
    }

    pub fn read_posmap(&self, ov: &Overlay, start: u32, len: u32) -> Vec<u128> {
        let h = self.layout.leaf_bits();
        let mut out = Vec::with_capacity(len as usize * h);
        for id in start..start + len {
            match ov.posmap.get(&id) {
                Some(v) => out.extend_from_slice(v),
                None => {
                    let i = id as usize * h;
                    out.extend_from_slice(&self.posmap[i..i + h]);
                }
            }
        }
        out
    }

    /// Commit a batch: each touched slot and entry is written exactly once.
    /// Returns the number of tree slots written and the most writes any one
    /// slot received.
    pub fn apply(&mut self, ov: Overlay) -> (usize, usize) {
        let sb = self.layout.slot_bits();
        let h = self.layout.leaf_bits();
        let mut writes: BTreeMap<usize, usize> = BTreeMap::new();
        for (g, v) in ov.slots {
            self.tree[g * sb..(g + 1) * sb].copy_from_slice(&v);
            *writes.entry(g).or_default() += 1;
        }
        for (id, v) in ov.posmap {
            let i = id as usize * h;
            self.posmap[i..i + h].copy_from_slice(&v);
        }
        self.evict_counter = ov.evict_counter;
        self.accesses = ov.accesses;
        self.sessions = ov.sessions;
        self.epoch += 1;
        (writes.len(), writes.values().copied().max().unwrap_or(0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.layout.params;
        let mut out = Vec::with_capacity(128 + 16 * (self.tree.len() + self.posmap.len()));
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_be_bytes());
        out.push(self.role.as_u8());
        for v in [
            p.num_blocks,
            p.bucket_size,
            p.payload_len,
            p.stash_capacity,
            p.evictions_per_access,
            self.layout.record_chunks,
        ] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.evict_counter.to_be_bytes());
        out.extend_from_slice(&self.accesses.to_be_bytes());
        out.extend_from_slice(&self.sessions.to_be_bytes());
        out.extend_from_slice(&self.size.to_be_bytes());
        out.extend_from_slice(&self.root.0);
        match self.delta {
            Some(d) => {
                out.push(1);
                out.extend_from_slice(&d.value().to_be_bytes());
            }
            None => out.push(0),
        }
        for labels in [&self.tree, &self.posmap] {
            out.extend_from_slice(&(labels.len() as u64).to_be_bytes());
            for l in labels.iter() {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        let sum: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<LabelState, NodeError> {
        let bad = |m: &str| NodeError::State(format!("snapshot: {m}"));
        if b.len() < 32 + 4 {
            return Err(bad("truncated"));
        }
        let (body, sum) = b.split_at(b.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }
        let mut r = Reader::new(body);
        let st = (|| -> Result<LabelState, NodeError> {
            if r.array::<4>()? != SNAPSHOT_MAGIC {
                return Err(bad("bad magic"));
            }
            let version = r.u16()?;
            if version != SNAPSHOT_VERSION {
                return Err(bad(&format!("unsupported version {version}")));
            }
            let role = Role::from_u8(r.u8()?).ok_or_else(|| bad("role"))?;
            let (n, z, d, s, e, k) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let params = OramParams::new(n, z, d)
                .and_then(|p| p.with_stash(s))
                .and_then(|p| p.with_evictions(e))
                .map_err(|e| bad(&e.to_string()))?;
            let layout = Layout::new(params, k).map_err(|e| bad(&e.to_string()))?;
            let epoch = r.u64()?;
            let evict_counter = r.u64()?;
            let accesses = r.u64()?;
            let sessions = r.u64()?;
            let size = r.u32()?;
            let root = Digest(r.array()?);
            let delta = match r.u8()? {
                0 => None,
                1 => Some(Delta::from_u128(r.u128()?)),
                _ => return Err(bad("delta flag")),
            };
            if delta.is_some() != (role == Role::Index) {
                return Err(bad("delta presence does not match role"));
            }
            let want_tree = params.total_slots() * layout.slot_bits();
            let want_pos = n as usize * layout.leaf_bits();
            let mut read = |want: usize| -> Result<Vec<u128>, NodeError> {
                let len = r.u64()? as usize;
                if len != want {
                    return Err(bad("label count does not match parameters"));
                }
                r.labels(len)
            };
            let tree = read(want_tree)?;
            let posmap = read(want_pos)?;
            r.finish()?;
            Ok(LabelState {
                role,
                layout,
                delta,
                epoch,
                evict_counter,
                accesses,
                sessions,
                size,
                root,
                tree,
                posmap,
            })
        })()
        .map_err(|e| match e {
            NodeError::State(_) => e,
            other => bad(&other.to_string()),
        })?;
        Ok(st)
    }

    /// Write atomically via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), NodeError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LabelState, NodeError> {
        let b = fs::read(path)
            .map_err(|e| NodeError::State(format!("cannot read {}: {e}", path.display())))?;
        LabelState::from_bytes(&b)
    }
}

pub fn state_file(dir: &Path, role: Role) -> std::path::PathBuf {
    dir.join(format!("{role}.state"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use oct_core::oram::{self, Op};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Layout, OramTree, PositionMap) {
        let p = OramParams::new(64, 2, 32).unwrap().with_stash(6).unwrap();
        let lay = Layout::new(p, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut t, mut pm) = oram::init(p, &mut rng).unwrap();
        for id in 0..40 {
            t.access(&mut pm, id, Op::Write(&[id as u8; 32]), &mut rng).unwrap();
        }
        (lay, t, pm)
    }

    #[test]
    fn encode_decode_roundtrip() {
        let (lay, t, pm) = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (i, d) = encode_pair(&lay, &t, &pm, 3, Digest::empty(), &mut rng);
        let (t2, pm2) = decode_pair(&i, &d).unwrap();
        assert_eq!(normalized(&t2), normalized(&t));
        assert_eq!(pm2, pm);
    }

    #[test]
    fn snapshot_roundtrip_and_corruption() {
        let (lay, t, pm) = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (i, d) = encode_pair(&lay, &t, &pm, 3, Digest::empty(), &mut rng);
        for s in [&i, &d] {
            let b = s.to_bytes();
            let back = LabelState::from_bytes(&b).unwrap();
            assert!(back == *s);
            assert_eq!(back.to_bytes(), b);
            for cut in [0, 10, b.len() / 2, b.len() - 1] {
                assert!(matches!(LabelState::from_bytes(&b[..cut]), Err(NodeError::State(_))));
            }
            let mut flipped = b.clone();
            flipped[40] ^= 1;
            assert!(LabelState::from_bytes(&flipped).is_err());
        }
    }
}
