//! Precomputation pools.
//!
//! Item `n` of a pool is always `make(n)`, whether it was produced ahead of
//! time by a filler or synchronously on an empty take, and items are handed
//! out in sequence order. Seeded runs therefore see identical transcripts with
//! or without precomputation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use super::garble::GarbledOutput;
use super::ot::ExpPair;

pub type Maker<T> = Arc<dyn Fn(u64) -> T + Send + Sync>;

#[derive(Debug)]
pub struct Pooled<T> {
    pub seq: u64,
    pub item: T,
    /// True when the item was computed by `take` itself.
    pub synchronous: bool,
}

struct Inner<T> {
    ready: BTreeMap<u64, T>,
    in_flight: BTreeSet<u64>,
    next_claim: u64,
    next_dispense: u64,
}

pub struct Pool<T> {
    make: Maker<T>,
    inner: Mutex<Inner<T>>,
    cv: Condvar,
    sync_computations: AtomicU64,
    dispensed: AtomicU64,
}

impl<T> Pool<T> {
    pub fn new(make: Maker<T>) -> Self {
        Pool {
            make,
            inner: Mutex::new(Inner {
                ready: BTreeMap::new(),
                in_flight: BTreeSet::new(),
                next_claim: 0,
                next_dispense: 0,
            }),
            cv: Condvar::new(),
            sync_computations: AtomicU64::new(0),
            dispensed: AtomicU64::new(0),
        }
    }

    /// Number of items ready or being computed ahead of demand.
    pub fn stocked(&self) -> usize {
        let g = self.inner.lock().unwrap();
        g.ready.len() + g.in_flight.len()
    }

    pub fn ready(&self) -> usize {
        self.inner.lock().unwrap().ready.len()
    }

    pub fn sync_computations(&self) -> u64 {
        self.sync_computations.load(Ordering::Relaxed)
    }

    pub fn dispensed(&self) -> u64 {
        self.dispensed.load(Ordering::Relaxed)
    }

    pub fn next_seq(&self) -> u64 {
        self.inner.lock().unwrap().next_dispense
    }

    /// Produce one item ahead of demand; returns false if `limit` is already met.
    pub fn fill_one(&self, limit: usize) -> bool {
        let seq = {
            let mut g = self.inner.lock().unwrap();
            if g.ready.len() + g.in_flight.len() >= limit {
                return false;
            }
            let s = g.next_claim;
            g.next_claim += 1;
            g.in_flight.insert(s);
            s
        };
        let item = (self.make)(seq);
        let mut g = self.inner.lock().unwrap();
        g.in_flight.remove(&seq);
        g.ready.insert(seq, item);
        self.cv.notify_all();
        true
    }

    /// Add `count` items to the pool.
    pub fn fill(&self, count: usize) {
        for _ in 0..count {
            let limit = self.stocked() + 1;
            self.fill_one(limit);
        }
    }

    /// Top the pool up to `target` items.
    pub fn fill_to(&self, target: usize) {
        while self.fill_one(target) {}
    }

    pub fn take(&self) -> Pooled<T> {
        let mut g = self.inner.lock().unwrap();
        let seq = g.next_dispense;
        g.next_dispense += 1;
        loop {
            if let Some(item) = g.ready.remove(&seq) {
                self.dispensed.fetch_add(1, Ordering::Relaxed);
                return Pooled {
                    seq,
                    item,
                    synchronous: false,
                };
            }
            if g.in_flight.contains(&seq) {
                // A filler is already computing this exact item.
                g = self.cv.wait(g).unwrap();
                continue;
            }
            debug_assert_eq!(g.next_claim, seq);
            g.next_claim = seq + 1;
            drop(g);
            self.sync_computations.fetch_add(1, Ordering::Relaxed);
            self.dispensed.fetch_add(1, Ordering::Relaxed);
            return Pooled {
                seq,
                item: (self.make)(seq),
                synchronous: true,
            };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Exponentiation,
    Circuit(usize),
}

/// Exponentiation pairs plus one circuit pool per fixed template.
pub struct PrecomputePool {
    pub exponentiations: Pool<ExpPair>,
    pub circuits: Vec<Pool<GarbledOutput>>,
}

impl PrecomputePool {
    pub fn new(exps: Maker<ExpPair>, circuits: Vec<Maker<GarbledOutput>>) -> Self {
        PrecomputePool {
            exponentiations: Pool::new(exps),
            circuits: circuits.into_iter().map(Pool::new).collect(),
        }
    }

    pub fn fill(&self, kind: PoolKind, count: usize) {
        match kind {
            PoolKind::Exponentiation => self.exponentiations.fill(count),
            PoolKind::Circuit(t) => self.circuits[t].fill(count),
        }
    }

    pub fn take_exp(&self) -> Pooled<ExpPair> {
        self.exponentiations.take()
    }

    pub fn take_circuit(&self, template: usize) -> Pooled<GarbledOutput> {
        self.circuits[template].take()
    }

    pub fn sync_computations(&self) -> u64 {
        self.exponentiations.sync_computations()
            + self.circuits.iter().map(Pool::sync_computations).sum::<u64>()
    }
}
