//! Plaintext Circuit ORAM.
//!
//! This is the reference implementation the 2PC protocol is checked against:
//! the same deterministic tie-breaking rules are evaluated inside garbled
//! circuits by the node crate.

mod batch;
mod evict;
mod snapshot;

pub use batch::{apply_permutation, compose_batch, Move, TreePermutation};
pub use evict::{
    deepest_in_position, evict_onepass, legal_depth, prepare_deepest, prepare_target, PathView,
};
pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use rand::Rng;
use thiserror::Error;

pub const DUMMY_ID: u32 = u32::MAX;
pub const DEFAULT_BUCKET_SIZE: u32 = 3;
pub const DEFAULT_STASH: u32 = 64;
pub const DEFAULT_EVICTIONS: u32 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OramError {
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("block id {0} out of range")]
    BadBlockId(u32),
    #[error("payload length {got}, expected {want}")]
    PayloadLength { got: usize, want: usize },
    #[error("stash overflow: capacity {capacity}, occupancy {occupancy} after {accesses} accesses")]
    StashOverflow {
        capacity: u32,
        occupancy: u32,
        accesses: u64,
    },
    #[error("slot locator {0:?} out of range")]
    BadLocator(SlotLocator),
    #[error("plan does not match tree state at {0:?}")]
    PlanMismatch(SlotLocator),
    #[error("plans are not composable at {0:?}")]
    NonComposable(SlotLocator),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub id: u32,
    pub leaf: u32,
    pub payload: Vec<u8>,
}

impl Block {
    pub fn dummy(payload_len: usize) -> Block {
        Block {
            id: DUMMY_ID,
            leaf: 0,
            payload: vec![0; payload_len],
        }
    }

    pub fn is_dummy(&self) -> bool {
        self.id == DUMMY_ID
    }

    pub fn encoded_len(payload_len: usize) -> usize {
        8 + payload_len
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.leaf.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub slots: Vec<Block>,
}

impl Bucket {
    pub fn empty(z: usize, payload_len: usize) -> Bucket {
        Bucket {
            slots: vec![Block::dummy(payload_len); z],
        }
    }

    pub fn occupancy(&self) -> usize {
        self.slots.iter().filter(|b| !b.is_dummy()).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.slots {
            b.encode(&mut out);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OramParams {
    pub num_blocks: u32,
    pub bucket_size: u32,
    pub payload_len: u32,
    pub stash_capacity: u32,
    pub evictions_per_access: u32,
}

impl OramParams {
    pub fn new(num_blocks: u32, bucket_size: u32, payload_len: u32) -> Result<Self, OramError> {
        OramParams {
            num_blocks,
            bucket_size,
            payload_len,
            stash_capacity: DEFAULT_STASH,
            evictions_per_access: DEFAULT_EVICTIONS,
        }
        .validated()
    }

    pub fn with_stash(mut self, stash: u32) -> Result<Self, OramError> {
        self.stash_capacity = stash;
        self.validated()
    }

    pub fn with_evictions(mut self, evictions: u32) -> Result<Self, OramError> {
        self.evictions_per_access = evictions;
        self.validated()
    }

    pub fn validated(self) -> Result<Self, OramError> {
        if self.num_blocks == 0 || self.bucket_size == 0 || self.payload_len == 0 {
            return Err(OramError::BadParams("N, Z and D must be at least 1".into()));
        }
        if self.num_blocks > 1 << 30 {
            return Err(OramError::BadParams("N above 2^30".into()));
        }
        if self.stash_capacity == 0 {
            return Err(OramError::BadParams("stash capacity must be at least 1".into()));
        }
        if self.evictions_per_access == 0 {
            return Err(OramError::BadParams("at least one eviction per access".into()));
        }
        Ok(self)
    }

    /// L = ceil(log2 N).
    pub fn height(&self) -> u32 {
        if self.num_blocks <= 1 {
            0
        } else {
            32 - (self.num_blocks - 1).leading_zeros()
        }
    }

    pub fn num_leaves(&self) -> u32 {
        1 << self.height()
    }

    pub fn num_buckets(&self) -> usize {
        (1usize << (self.height() + 1)) - 1
    }

    /// Bit width of a block id inside circuits.
    pub fn id_bits(&self) -> u32 {
        self.height().max(1)
    }

    /// Stash slots plus one bucket per level.
    pub fn path_slots(&self) -> usize {
        self.stash_capacity as usize + (self.height() as usize + 1) * self.bucket_size as usize
    }

    pub fn total_slots(&self) -> usize {
        self.stash_capacity as usize + self.num_buckets() * self.bucket_size as usize
    }

    /// Bucket index (level order, root = 0) at `depth` on the path to `leaf`.
    pub fn bucket_on_path(&self, leaf: u32, depth: u32) -> usize {
        let l = self.height();
        ((((1u64 << l) + leaf as u64) >> (l - depth)) - 1) as usize
    }

    pub fn path_buckets(&self, leaf: u32) -> Vec<usize> {
        (0..=self.height()).map(|d| self.bucket_on_path(leaf, d)).collect()
    }

    pub fn bucket_depth(&self, bucket: usize) -> u32 {
        63 - (bucket as u64 + 1).leading_zeros()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotLocator {
    Stash(u32),
    Tree { bucket: u32, slot: u32 },
}

impl SlotLocator {
    /// Flat index: stash slots first, then buckets in level order.
    pub fn global(&self, p: &OramParams) -> usize {
        match *self {
            SlotLocator::Stash(k) => k as usize,
            SlotLocator::Tree { bucket, slot } => {
                p.stash_capacity as usize + bucket as usize * p.bucket_size as usize + slot as usize
            }
        }
    }

    pub fn from_global(g: usize, p: &OramParams) -> SlotLocator {
        let s = p.stash_capacity as usize;
        if g < s {
            SlotLocator::Stash(g as u32)
        } else {
            let t = g - s;
            SlotLocator::Tree {
                bucket: (t / p.bucket_size as usize) as u32,
                slot: (t % p.bucket_size as usize) as u32,
            }
        }
    }
}

/// Slots visited by one eviction pass, in circuit order: stash, then buckets
/// root to leaf.
pub fn path_locators(p: &OramParams, leaf: u32) -> Vec<SlotLocator> {
    let mut v: Vec<SlotLocator> = (0..p.stash_capacity).map(SlotLocator::Stash).collect();
    for b in p.path_buckets(leaf) {
        for s in 0..p.bucket_size {
            v.push(SlotLocator::Tree {
                bucket: b as u32,
                slot: s,
            });
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionMap {
    pub entries: Vec<u32>,
}

impl PositionMap {
    pub fn random<R: Rng + ?Sized>(p: &OramParams, rng: &mut R) -> PositionMap {
        let leaves = p.num_leaves();
        PositionMap {
            entries: (0..p.num_blocks).map(|_| rng.gen_range(0..leaves)).collect(),
        }
    }

    pub fn get(&self, id: u32) -> u32 {
        self.entries[id as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op<'a> {
    Read,
    Write(&'a [u8]),
}

#[derive(Clone, Debug)]
pub struct AccessOutcome {
    pub payload: Vec<u8>,
    /// Leaf whose path was read.
    pub read_leaf: u32,
    pub new_leaf: u32,
    /// Read/remap step first, then one plan per eviction.
    pub plans: Vec<EvictionPlan>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvictionPlan {
    pub path_leaf: u32,
    pub moves: Vec<Move>,
}

impl EvictionPlan {
    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OramTree {
    pub params: OramParams,
    pub buckets: Vec<Bucket>,
    pub stash: Vec<Block>,
    pub evict_counter: u64,
    pub accesses: u64,
    pub max_stash: u32,
}

pub fn init<R: Rng + ?Sized>(
    params: OramParams,
    rng: &mut R,
) -> Result<(OramTree, PositionMap), OramError> {
    let params = params.validated()?;
    Ok((OramTree::new(params), PositionMap::random(&params, rng)))
}

impl OramTree {
    pub fn new(params: OramParams) -> OramTree {
        let d = params.payload_len as usize;
        OramTree {
            params,
            buckets: vec![Bucket::empty(params.bucket_size as usize, d); params.num_buckets()],
            stash: vec![Block::dummy(d); params.stash_capacity as usize],
            evict_counter: 0,
            accesses: 0,
            max_stash: 0,
        }
    }

    pub fn height(&self) -> u32 {
        self.params.height()
    }

    pub fn stash_occupancy(&self) -> u32 {
        self.stash.iter().filter(|b| !b.is_dummy()).count() as u32
    }

    pub fn slot(&self, loc: SlotLocator) -> Option<&Block> {
        match loc {
            SlotLocator::Stash(k) => self.stash.get(k as usize),
            SlotLocator::Tree { bucket, slot } => self
                .buckets
                .get(bucket as usize)
                .and_then(|b| b.slots.get(slot as usize)),
        }
    }

    pub fn slot_mut(&mut self, loc: SlotLocator) -> Option<&mut Block> {
        match loc {
            SlotLocator::Stash(k) => self.stash.get_mut(k as usize),
            SlotLocator::Tree { bucket, slot } => self
                .buckets
                .get_mut(bucket as usize)
                .and_then(|b| b.slots.get_mut(slot as usize)),
        }
    }

    pub fn find_block(&self, id: u32) -> Option<SlotLocator> {
        if let Some(k) = self.stash.iter().position(|b| b.id == id) {
            return Some(SlotLocator::Stash(k as u32));
        }
        for (bi, b) in self.buckets.iter().enumerate() {
            if let Some(s) = b.slots.iter().position(|x| x.id == id) {
                return Some(SlotLocator::Tree {
                    bucket: bi as u32,
                    slot: s as u32,
                });
            }
        }
        None
    }

    /// Next scheduled eviction leaf: bit-reversed counter (reverse lexicographic order).
    pub fn next_scheduled_leaf(&mut self) -> u32 {
        let leaf = scheduled_leaf(self.evict_counter, self.height());
        self.evict_counter += 1;
        leaf
    }

    /// Apply a plan atomically: every source is cleared before any destination is written.
    pub fn apply_plan(&mut self, plan: &EvictionPlan) -> Result<(), OramError> {
        let d = self.params.payload_len as usize;
        for m in &plan.moves {
            if let Some(from) = m.from {
                let cur = self.slot(from).ok_or(OramError::BadLocator(from))?;
                if cur.id != m.block.id {
                    return Err(OramError::PlanMismatch(from));
                }
            }
            self.slot(m.to).ok_or(OramError::BadLocator(m.to))?;
        }
        for m in &plan.moves {
            if let Some(from) = m.from {
                *self.slot_mut(from).unwrap() = Block::dummy(d);
            }
        }
        for m in &plan.moves {
            let dst = self.slot_mut(m.to).unwrap();
            if !dst.is_dummy() {
                return Err(OramError::PlanMismatch(m.to));
            }
            *dst = m.block.clone();
        }
        Ok(())
    }

    /// Plan for the read-and-remap step: the block leaves its slot and lands in
    /// the first free stash slot with a fresh leaf (and new payload on writes).
    pub fn plan_read(
        &self,
        id: u32,
        read_leaf: u32,
        new_leaf: u32,
        new_payload: Option<&[u8]>,
    ) -> Result<(Vec<u8>, EvictionPlan), OramError> {
        let p = &self.params;
        let mut found = None;
        for loc in path_locators(p, read_leaf) {
            if self.slot(loc).map(|b| b.id) == Some(id) {
                found = Some(loc);
                break;
            }
        }
        let prior = match found {
            Some(loc) => self.slot(loc).unwrap().payload.clone(),
            None => vec![0u8; p.payload_len as usize],
        };
        let free = (0..p.stash_capacity).find(|&k| {
            self.stash[k as usize].is_dummy() || found == Some(SlotLocator::Stash(k))
        });
        let Some(free) = free else {
            return Err(OramError::StashOverflow {
                capacity: p.stash_capacity,
                occupancy: self.stash_occupancy() + 1,
                accesses: self.accesses,
            });
        };
        let block = Block {
            id,
            leaf: new_leaf,
            payload: new_payload.map(<[u8]>::to_vec).unwrap_or_else(|| prior.clone()),
        };
        let mv = Move {
            from: found,
            to: SlotLocator::Stash(free),
            block,
        };
        Ok((
            prior,
            EvictionPlan {
                path_leaf: read_leaf,
                moves: vec![mv],
            },
        ))
    }

    pub fn access<R: Rng + ?Sized>(
        &mut self,
        posmap: &mut PositionMap,
        id: u32,
        op: Op<'_>,
        rng: &mut R,
    ) -> Result<AccessOutcome, OramError> {
        let p = self.params;
        if id >= p.num_blocks {
            return Err(OramError::BadBlockId(id));
        }
        let new_payload = match op {
            Op::Read => None,
            Op::Write(data) => {
                if data.len() != p.payload_len as usize {
                    return Err(OramError::PayloadLength {
                        got: data.len(),
                        want: p.payload_len as usize,
                    });
                }
                Some(data)
            }
        };
        let new_leaf = rng.gen_range(0..p.num_leaves());
        self.access_remap(posmap, id, new_payload, new_leaf)
    }

    /// `access` with the fresh leaf supplied by the caller.
    pub fn access_remap(
        &mut self,
        posmap: &mut PositionMap,
        id: u32,
        new_payload: Option<&[u8]>,
        new_leaf: u32,
    ) -> Result<AccessOutcome, OramError> {
        let p = self.params;
        if id >= p.num_blocks {
            return Err(OramError::BadBlockId(id));
        }
        if new_leaf >= p.num_leaves() {
            return Err(OramError::BadParams(format!("leaf {new_leaf} out of range")));
        }
        let read_leaf = posmap.get(id);
        let (payload, read_plan) = self.plan_read(id, read_leaf, new_leaf, new_payload)?;
        self.apply_plan(&read_plan)?;
        posmap.entries[id as usize] = new_leaf;
        self.accesses += 1;
        self.max_stash = self.max_stash.max(self.stash_occupancy());
        let mut plans = vec![read_plan];
        for e in 0..p.evictions_per_access {
            let leaf = if e == 0 {
                read_leaf
            } else {
                self.next_scheduled_leaf()
            };
            let plan = evict_onepass(self, leaf);
            self.apply_plan(&plan)?;
            plans.push(plan);
        }
        Ok(AccessOutcome {
            payload,
            read_leaf,
            new_leaf,
            plans,
        })
    }

    /// Full-scan consistency check: path invariant, unique ids, and (optionally)
    /// agreement with a position map.
    pub fn check_invariants(&self, posmap: Option<&PositionMap>) -> Result<(), String> {
        let p = &self.params;
        let mut seen = std::collections::HashSet::new();
        let mut check = |b: &Block, where_: String| -> Result<(), String> {
            if b.is_dummy() {
                return Ok(());
            }
            if b.id >= p.num_blocks {
                return Err(format!("{where_}: id {} out of range", b.id));
            }
            if b.leaf >= p.num_leaves() {
                return Err(format!("{where_}: leaf {} out of range", b.leaf));
            }
            if b.payload.len() != p.payload_len as usize {
                return Err(format!("{where_}: payload length"));
            }
            if !seen.insert(b.id) {
                return Err(format!("{where_}: duplicate id {}", b.id));
            }
            if let Some(pm) = posmap {
                if pm.get(b.id) != b.leaf {
                    return Err(format!("{where_}: leaf disagrees with position map"));
                }
            }
            Ok(())
        };
        for (k, b) in self.stash.iter().enumerate() {
            check(b, format!("stash[{k}]"))?;
        }
        for (bi, bucket) in self.buckets.iter().enumerate() {
            if bucket.slots.len() != p.bucket_size as usize {
                return Err(format!("bucket {bi} has wrong slot count"));
            }
            let depth = p.bucket_depth(bi);
            for (s, b) in bucket.slots.iter().enumerate() {
                check(b, format!("bucket[{bi}][{s}]"))?;
                if !b.is_dummy() && p.bucket_on_path(b.leaf, depth) != bi {
                    return Err(format!(
                        "bucket[{bi}][{s}]: block {} with leaf {} off its path",
                        b.id, b.leaf
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn scheduled_leaf(counter: u64, height: u32) -> u32 {
    if height == 0 {
        return 0;
    }
    let c = (counter & ((1u64 << height) - 1)) as u32;
    c.reverse_bits() >> (32 - height)
}
