//! Precomputation pools for one server and the threads that keep them full.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use oct_core::mpc::{garble_with, Delta, ExpPair, GarbledOutput, Maker, PrecomputePool};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest as _, Sha256};

use crate::templates::Templates;

/// Deterministic per-item randomness.
pub fn derive_rng(seed: &[u8; 32], parts: &[&[u8]]) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed);
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    ChaCha12Rng::from_seed(h.finalize().into())
}

/// Tweak base for item `seq` of template `template`: AND gate `k` of the
/// circuit uses `base + k`, so bases are spaced `2^40` apart.
pub fn tweak_base(template: usize, generation: u64, seq: u64) -> u128 {
    ((template as u128) << 120) | (((generation & 0xff_ffff_ffff) as u128) << 80) | ((seq as u128) << 40)
}

/// Split a circuit budget across templates in proportion to per-lookup use.
pub fn circuit_targets(usage: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = usage.iter().sum();
    usage
        .iter()
        .map(|&u| {
            if u == 0 || total == 0 {
                0
            } else {
                ((total * u + sum / 2) / sum).max(1)
            }
        })
        .collect()
}

pub struct PoolSet {
    pub pool: Arc<PrecomputePool>,
    pub exp_target: usize,
    pub circuit_targets: Vec<usize>,
    stop: Arc<AtomicBool>,
    fillers: Vec<JoinHandle<()>>,
}

impl PoolSet {
    /// Index server pools: exponentiations plus one circuit pool per template.
    pub fn garbler(
        templates: &Arc<Templates>,
        delta: Delta,
        seed: [u8; 32],
        generation: u64,
        exp_target: usize,
        circuit_total: usize,
    ) -> PoolSet {
        let makers: Vec<Maker<GarbledOutput>> = (0..templates.list.len())
            .map(|t| {
                let circuit = templates.list[t].circuit.clone();
                let m: Maker<GarbledOutput> = Arc::new(move |seq| {
                    let mut rng = derive_rng(
                        &seed,
                        &[b"circuit", &generation.to_be_bytes(), &(t as u32).to_be_bytes(), &seq.to_be_bytes()],
                    );
                    garble_with(circuit.clone(), delta, tweak_base(t, generation, seq), &mut rng)
                });
                m
            })
            .collect();
        let targets = circuit_targets(&templates.usage_per_lookup(), circuit_total);
        PoolSet::with_makers(exp_maker(seed, generation), makers, exp_target, targets)
    }

    /// Data server pools: exponentiations only.
    pub fn evaluator(seed: [u8; 32], generation: u64, exp_target: usize) -> PoolSet {
        PoolSet::with_makers(exp_maker(seed, generation), Vec::new(), exp_target, Vec::new())
    }

    fn with_makers(
        exps: Maker<ExpPair>,
        circuits: Vec<Maker<GarbledOutput>>,
        exp_target: usize,
        circuit_targets: Vec<usize>,
    ) -> PoolSet {
        PoolSet {
            pool: Arc::new(PrecomputePool::new(exps, circuits)),
            exp_target,
            circuit_targets,
            stop: Arc::new(AtomicBool::new(false)),
            fillers: Vec::new(),
        }
    }

    /// Most depleted pool relative to its target, if any is below target.
    fn neediest(pool: &PrecomputePool, exp_target: usize, targets: &[usize]) -> Option<(Option<usize>, usize)> {
        let mut best: Option<(Option<usize>, usize, f64)> = None;
        let mut consider = |which: Option<usize>, stocked: usize, target: usize| {
            if stocked < target {
                let frac = stocked as f64 / target as f64;
                if best.as_ref().map_or(true, |b| frac < b.2) {
                    best = Some((which, target, frac));
                }
            }
        };
        consider(None, pool.exponentiations.stocked(), exp_target);
        for (t, &target) in targets.iter().enumerate() {
            consider(Some(t), pool.circuits[t].stocked(), target);
        }
        best.map(|(w, t, _)| (w, t))
    }

    /// Produce one item for the neediest pool; false when all are full.
    pub fn fill_step(&self) -> bool {
        fill_step(&self.pool, self.exp_target, &self.circuit_targets)
    }

    /// Fill every pool to its target on the calling thread.
    pub fn fill_all(&self) {
        while self.fill_step() {}
    }

    pub fn is_full(&self) -> bool {
        Self::neediest(&self.pool, self.exp_target, &self.circuit_targets).is_none()
    }

    /// Block until every pool is at target or `timeout` elapses.
    pub fn wait_full(&self, timeout: Duration) -> bool {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if self.pool.exponentiations.ready() >= self.exp_target
                && self
                    .pool
                    .circuits
                    .iter()
                    .zip(&self.circuit_targets)
                    .all(|(p, t)| p.ready() >= *t)
            {
                return true;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        false
    }

    pub fn start_fillers(&mut self, threads: usize) {
        for i in 0..threads {
            let pool = self.pool.clone();
            let stop = self.stop.clone();
            let (et, ct) = (self.exp_target, self.circuit_targets.clone());
            let h = std::thread::Builder::new()
                .name(format!("pool-filler-{i}"))
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        if !fill_step(&pool, et, &ct) {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                    }
                })
                .expect("spawn pool filler");
            self.fillers.push(h);
        }
    }

    pub fn sync_computations(&self) -> u64 {
        self.pool.sync_computations()
    }
}

fn fill_step(pool: &PrecomputePool, exp_target: usize, targets: &[usize]) -> bool {
    match PoolSet::neediest(pool, exp_target, targets) {
        None => false,
        Some((None, t)) => {
            pool.exponentiations.fill_one(t);
            true
        }
        Some((Some(c), t)) => {
            pool.circuits[c].fill_one(t);
            true
        }
    }
}

impl Drop for PoolSet {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.fillers.drain(..) {
            let _ = h.join();
        }
    }
}

fn exp_maker(seed: [u8; 32], generation: u64) -> Maker<ExpPair> {
    Arc::new(move |seq| {
        let mut rng = derive_rng(&seed, &[b"exp", &generation.to_be_bytes(), &seq.to_be_bytes()]);
        ExpPair::random(&mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_proportional() {
        assert_eq!(circuit_targets(&[1, 4, 0, 11, 22], 38), vec![1, 4, 0, 11, 22]);
        assert_eq!(circuit_targets(&[1, 1, 2], 0), vec![0, 0, 0]);
        assert!(circuit_targets(&[1, 100], 10)[0] >= 1);
    }

    #[test]
    fn tweak_ranges_do_not_overlap() {
        let a = tweak_base(3, 7, 1);
        let b = tweak_base(3, 7, 2);
        assert_eq!(b - a, 1 << 40);
        assert_ne!(tweak_base(2, 7, 1), a);
        assert_ne!(tweak_base(3, 8, 1), a);
    }
}
