use std::collections::HashMap;

use oct_core::oram::{
    self, apply_permutation, compose_batch, deepest_in_position, evict_onepass, legal_depth,
    prepare_deepest, prepare_target, Block, Bucket, EvictionPlan, Move, Op, OramParams, OramTree,
    PathView, PositionMap, SlotLocator, TreePermutation,
};
use oct_core::stats::chi_square_uniform;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn payload(rng: &mut ChaCha8Rng, d: usize) -> Vec<u8> {
    (0..d).map(|_| rng.gen()).collect()
}

/// Tree populated by `ops` random accesses; returns the tree and its map.
fn warmed(params: OramParams, ops: usize, seed: u64) -> (OramTree, PositionMap, ChaCha8Rng) {
    let mut r = rng(seed);
    let (mut t, mut pm) = oram::init(params, &mut r).unwrap();
    for _ in 0..ops {
        let id = r.gen_range(0..params.num_blocks);
        let p = payload(&mut r, params.payload_len as usize);
        t.access(&mut pm, id, Op::Write(&p), &mut r).unwrap();
    }
    (t, pm, r)
}

#[test]
fn init_shapes() {
    let p = OramParams::new(1, 3, 8).unwrap();
    assert_eq!(p.height(), 0);
    assert_eq!(OramTree::new(p).buckets.len(), 1);
    let p = OramParams::new(256, 3, 8).unwrap();
    let t = OramTree::new(p);
    assert_eq!(t.buckets.len(), 511);
    assert_eq!(t.buckets.iter().map(|b| b.slots.len()).sum::<usize>(), 1533);
    assert!(OramParams::new(0, 3, 8).is_err());
    assert!(OramParams::new(4, 0, 8).is_err());
    assert!(OramParams::new(4, 3, 0).is_err());
}

#[test]
fn init_leaves_uniform() {
    let p = OramParams::new(1000, 3, 4).unwrap();
    let mut r = rng(1);
    let mut hist = vec![0u64; p.num_leaves() as usize];
    for _ in 0..100 {
        for l in PositionMap::random(&p, &mut r).entries {
            hist[l as usize] += 1;
        }
    }
    let pv = chi_square_uniform(&hist);
    assert!(pv > 0.01, "p = {pv}");
}

#[test]
fn write_then_read_and_empty_read() {
    let p = OramParams::new(16, 3, 8).unwrap();
    let mut r = rng(2);
    let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
    let zero = t.access(&mut pm, 5, Op::Read, &mut r).unwrap();
    assert_eq!(zero.payload, vec![0; 8]);
    t.access(&mut pm, 3, Op::Write(&[7; 8]), &mut r).unwrap();
    assert_eq!(t.access(&mut pm, 3, Op::Read, &mut r).unwrap().payload, vec![7; 8]);
    assert_eq!(t.access(&mut pm, 16, Op::Read, &mut r).unwrap_err(), oram::OramError::BadBlockId(16));
}

#[test]
fn oracle_equivalence_grid() {
    for &n in &[4u32, 16, 256] {
        for &z in &[2u32, 3, 4] {
            let p = OramParams::new(n, z, 16).unwrap();
            let mut r = rng(n as u64 * 10 + z as u64);
            let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
            let mut oracle = vec![vec![0u8; 16]; n as usize];
            for op in 0..10_000 {
                let id = r.gen_range(0..n);
                if r.gen_bool(0.5) {
                    let data = payload(&mut r, 16);
                    let out = t.access(&mut pm, id, Op::Write(&data), &mut r).unwrap();
                    assert_eq!(out.payload, oracle[id as usize]);
                    oracle[id as usize] = data;
                } else {
                    let out = t.access(&mut pm, id, Op::Read, &mut r).unwrap();
                    assert_eq!(out.payload, oracle[id as usize], "N={n} Z={z} op={op}");
                }
                if op % 500 == 0 {
                    t.check_invariants(Some(&pm)).unwrap();
                }
            }
            t.check_invariants(Some(&pm)).unwrap();
        }
    }
}

#[test]
fn repeated_reads_visit_uniform_paths() {
    let p = OramParams::new(64, 3, 4).unwrap();
    let (mut t, mut pm, mut r) = warmed(p, 200, 3);
    let mut hist = vec![0u64; p.num_leaves() as usize];
    for _ in 0..10_000 {
        let out = t.access(&mut pm, 7, Op::Read, &mut r).unwrap();
        hist[out.read_leaf as usize] += 1;
    }
    let pv = chi_square_uniform(&hist);
    assert!(pv > 0.01, "p = {pv}");
}

#[test]
fn legal_depth_is_common_prefix() {
    assert_eq!(legal_depth(0b101, 0b101, 3), 3);
    assert_eq!(legal_depth(0b101, 0b100, 3), 2);
    assert_eq!(legal_depth(0b001, 0b101, 3), 0);
    assert_eq!(legal_depth(0, 0, 0), 0);
}

fn blank(n: u32, z: u32, stash: u32) -> OramTree {
    OramTree::new(OramParams::new(n, z, 4).unwrap().with_stash(stash).unwrap())
}

fn blk(id: u32, leaf: u32) -> Block {
    Block { id, leaf, payload: vec![id as u8; 4] }
}

#[test]
fn deepest_examples() {
    let t = blank(8, 2, 4);
    let v = PathView::new(&t, 5);
    assert!(prepare_deepest(&v).iter().all(Option::is_none));
    assert!(prepare_target(&v, &prepare_deepest(&v)).iter().all(Option::is_none));
    assert!(evict_onepass(&t, 5).is_empty());

    let mut t = blank(8, 2, 4);
    t.stash[1] = blk(0, 5);
    let v = PathView::new(&t, 5);
    let d = prepare_deepest(&v);
    assert_eq!(d, vec![None, Some(0), Some(0), Some(0), Some(0)]);
    let tg = prepare_target(&v, &d);
    assert_eq!(tg[0], Some(4));
    let plan = evict_onepass(&t, 5);
    assert_eq!(plan.moves.len(), 1);
    assert_eq!(plan.moves[0].to, SlotLocator::Tree { bucket: 12, slot: 0 });

    // Equal reach: the candidate at the deeper position wins.
    let mut t = blank(8, 2, 4);
    t.stash[0] = blk(0, 4);
    let root = 0usize;
    t.buckets[root].slots[1] = blk(1, 4);
    let v = PathView::new(&t, 5);
    let d = prepare_deepest(&v);
    assert_eq!(d[2], Some(1));
    // Same position: lowest slot wins.
    let mut t = blank(8, 2, 4);
    t.buckets[0].slots[0] = blk(2, 4);
    t.buckets[0].slots[1] = blk(3, 4);
    let v = PathView::new(&t, 5);
    assert_eq!(deepest_in_position(&v, 1), Some((0, 3)));
}

/// Random path-invariant-respecting state, populated along the path to `path_leaf`.
fn random_state(r: &mut ChaCha8Rng, n: u32, z: u32, stash: u32, fill: f64, path_leaf: u32) -> OramTree {
    let mut t = blank(n, z, stash);
    let p = t.params;
    let l = p.height();
    let mut id = 0;
    for bi in p.path_buckets(path_leaf) {
        let depth = p.bucket_depth(bi);
        for s in 0..z as usize {
            if r.gen_bool(fill) {
                // Leaf in the subtree below this bucket.
                let first = ((bi + 1) << (l - depth)) - (1 << l);
                let leaf = first as u32 + r.gen_range(0..(1u32 << (l - depth)));
                t.buckets[bi].slots[s] = blk(id, leaf);
                id += 1;
            }
        }
    }
    for k in 0..stash as usize {
        if r.gen_bool(fill) {
            t.stash[k] = blk(id, r.gen_range(0..p.num_leaves()));
            id += 1;
        }
    }
    t.check_invariants(None).unwrap();
    t
}

fn brute_deepest(v: &PathView<'_>) -> Vec<Option<usize>> {
    let n = v.num_positions();
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, usize)> = None; // (reach, position)
            for pos in 0..i {
                for (_, b) in &v.positions[pos] {
                    if b.is_dummy() {
                        continue;
                    }
                    let r = v.reach(b);
                    if best.map_or(true, |(br, bp)| r > br || (r == br && pos > bp)) {
                        best = Some((r, pos));
                    }
                }
            }
            best.filter(|(r, _)| *r >= i).map(|(_, p)| p)
        })
        .collect()
}

/// Reference evictor: mutates a copy directly with brute-force metadata.
fn reference_evict(t: &OramTree, leaf: u32) -> OramTree {
    let view = PathView::new(t, leaf);
    let deepest = brute_deepest(&view);
    let target = prepare_target(&view, &deepest);
    let locs: Vec<Vec<SlotLocator>> = view
        .positions
        .iter()
        .map(|p| p.iter().map(|(l, _)| *l).collect())
        .collect();
    let mut out = t.clone();
    let mut hold: Option<Block> = None;
    let mut dest = None;
    for i in 0..locs.len() {
        let mut write = None;
        if hold.is_some() && dest == Some(i) {
            write = hold.take();
        }
        if let Some(tg) = target[i] {
            // Deepest block of the original contents at this position.
            let mut best: Option<(usize, usize)> = None;
            for (k, loc) in locs[i].iter().enumerate() {
                let b = t.slot(*loc).unwrap();
                if !b.is_dummy() {
                    let r = view.reach(b);
                    if best.map_or(true, |(_, br)| r > br) {
                        best = Some((k, r));
                    }
                }
            }
            let loc = locs[i][best.unwrap().0];
            hold = Some(out.slot(loc).unwrap().clone());
            *out.slot_mut(loc).unwrap() = Block::dummy(4);
            dest = Some(tg);
        }
        if let Some(b) = write {
            let loc = locs[i]
                .iter()
                .find(|l| out.slot(**l).unwrap().is_dummy())
                .expect("no room");
            *out.slot_mut(*loc).unwrap() = b;
        }
    }
    assert!(hold.is_none());
    out
}

#[test]
fn deepest_matches_brute_force_and_reference_evictor() {
    let mut r = rng(4);
    for case in 0..1000 {
        let fill = [0.2, 0.5, 0.8, 1.0][case % 4];
        let leaf = r.gen_range(0..32);
        let t = random_state(&mut r, 32, 3, 6, fill, leaf);
        let v = PathView::new(&t, leaf);
        assert_eq!(prepare_deepest(&v), brute_deepest(&v), "case {case}");
        let plan = evict_onepass(&t, leaf);
        let mut applied = t.clone();
        applied.apply_plan(&plan).unwrap();
        applied.check_invariants(None).unwrap();
        assert_eq!(applied, reference_evict(&t, leaf), "case {case}");
        // Hold discipline: each position sources and receives at most one block.
        let pos_of = |loc: SlotLocator| match loc {
            SlotLocator::Stash(_) => 0,
            SlotLocator::Tree { bucket, .. } => t.params.bucket_depth(bucket as usize) + 1,
        };
        let mut src = HashMap::new();
        let mut dst = HashMap::new();
        for m in &plan.moves {
            *src.entry(pos_of(m.from.unwrap())).or_insert(0) += 1;
            *dst.entry(pos_of(m.to)).or_insert(0) += 1;
            assert!(pos_of(m.to) > pos_of(m.from.unwrap()));
        }
        assert!(src.values().chain(dst.values()).all(|&c| c == 1));
    }
}

#[test]
fn targets_follow_free_space() {
    // Every bucket on the path full of blocks that belong at the leaf; nothing can move.
    let mut t = blank(8, 2, 4);
    let p = t.params;
    let mut id = 0;
    for b in p.path_buckets(3) {
        for s in 0..2 {
            t.buckets[b].slots[s] = blk(id, 3);
            id += 1;
        }
    }
    t.stash[0] = blk(id, 3);
    let v = PathView::new(&t, 3);
    let tg = prepare_target(&v, &prepare_deepest(&v));
    assert!(tg.iter().all(Option::is_none));
    // Free one leaf slot: a chain of moves opens from the stash down to the leaf.
    let leaf_bucket = p.bucket_on_path(3, 3);
    t.buckets[leaf_bucket].slots[1] = Block::dummy(4);
    let v = PathView::new(&t, 3);
    let tg = prepare_target(&v, &prepare_deepest(&v));
    assert_eq!(tg, vec![Some(1), Some(2), Some(3), Some(4), None]);
}

#[test]
fn stash_overflow_is_reported() {
    let p = OramParams::new(64, 1, 4).unwrap().with_stash(1).unwrap();
    let mut r = rng(5);
    let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
    let mut err = None;
    for i in 0..10_000 {
        if let Err(e) = t.access(&mut pm, i % 64, Op::Write(&[1; 4]), &mut r) {
            err = Some(e);
            break;
        }
    }
    assert!(matches!(err, Some(oram::OramError::StashOverflow { capacity: 1, .. })));
}

fn serial_plans(t: &mut OramTree, pm: &mut PositionMap, r: &mut ChaCha8Rng, accesses: usize) -> Vec<EvictionPlan> {
    let mut plans = Vec::new();
    for _ in 0..accesses {
        let id = r.gen_range(0..t.params.num_blocks);
        let data = payload(r, t.params.payload_len as usize);
        plans.extend(t.access(pm, id, Op::Write(&data), r).unwrap().plans);
    }
    plans
}

#[test]
fn compose_single_plan_is_identity() {
    let p = OramParams::new(32, 3, 8).unwrap();
    let (mut t, mut pm, mut r) = warmed(p, 50, 6);
    let before = t.clone();
    let plans = serial_plans(&mut t, &mut pm, &mut r, 1);
    let mut a = before.clone();
    a.apply_plan(&plans[0]).unwrap();
    let perm = compose_batch(&plans[..1], 8).unwrap();
    let mut b = before.clone();
    apply_permutation(&mut b, &perm).unwrap();
    assert_eq!(a, b);
    for m in &plans[0].moves {
        assert_eq!(perm.updates[&m.to], m.block);
    }
}

#[test]
fn compose_collapses_double_relocation() {
    let p = OramParams::new(8, 2, 4).unwrap().with_stash(2).unwrap();
    let mut t = OramTree::new(p);
    t.stash[0] = blk(9, 6);
    let root = SlotLocator::Tree { bucket: 0, slot: 0 };
    let leaf = SlotLocator::Tree { bucket: p.bucket_on_path(6, 3) as u32, slot: 0 };
    let a = EvictionPlan {
        path_leaf: 1,
        moves: vec![Move { from: Some(SlotLocator::Stash(0)), to: root, block: blk(9, 6) }],
    };
    let b = EvictionPlan {
        path_leaf: 6,
        moves: vec![Move { from: Some(root), to: leaf, block: blk(9, 6) }],
    };
    let perm = compose_batch(&[a.clone(), b.clone()], 4).unwrap();
    let writes_of_b = perm.updates.values().filter(|x| x.id == 9).count();
    assert_eq!(writes_of_b, 1);
    assert_eq!(perm.updates[&leaf].id, 9);
    let mut serial = t.clone();
    serial.apply_plan(&a).unwrap();
    serial.apply_plan(&b).unwrap();
    apply_permutation(&mut t, &perm).unwrap();
    assert_eq!(serial, t);
    // B replayed out of order no longer composes.
    assert!(compose_batch(&[b, a], 4).is_err());
}

#[test]
fn compose_sixteen_plans_matches_serial() {
    let p = OramParams::new(256, 3, 8).unwrap();
    let (mut t, mut pm, mut r) = warmed(p, 300, 7);
    let start = t.clone();
    let mut plans = serial_plans(&mut t, &mut pm, &mut r, 6);
    plans.truncate(16);
    let mut serial = start.clone();
    for pl in &plans {
        serial.apply_plan(pl).unwrap();
    }
    let perm = compose_batch(&plans, 8).unwrap();
    let mut batched = start.clone();
    apply_permutation(&mut batched, &perm).unwrap();
    assert_eq!(serial.buckets, batched.buckets);
    assert_eq!(serial.stash, batched.stash);
}

#[test]
fn permutation_inverse_restores() {
    let p = OramParams::new(64, 3, 8).unwrap();
    let (t, _, mut r) = warmed(p, 100, 8);
    let mut perm = TreePermutation::default();
    for _ in 0..40 {
        let g = r.gen_range(0..p.total_slots());
        let loc = SlotLocator::from_global(g, &p);
        perm.updates.insert(loc, blk(r.gen(), r.gen_range(0..64)));
    }
    let inv = perm.inverse_for(&t).unwrap();
    let mut m = t.clone();
    apply_permutation(&mut m, &perm).unwrap();
    apply_permutation(&mut m, &inv).unwrap();
    assert_eq!(m, t);
    let mut m = t.clone();
    apply_permutation(&mut m, &TreePermutation::default()).unwrap();
    assert_eq!(m, t);
    let mut bad = TreePermutation::default();
    bad.updates.insert(SlotLocator::Tree { bucket: 10_000, slot: 0 }, blk(1, 1));
    assert!(apply_permutation(&mut m, &bad).is_err());
    assert_eq!(m, t);
}

#[test]
fn snapshot_roundtrip_and_constant_bucket_size() {
    let p = OramParams::new(64, 3, 8).unwrap();
    let (t, pm, _) = warmed(p, 100, 9);
    let bytes = t.to_bytes();
    let back = OramTree::from_bytes(&bytes).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(&bytes[..4], b"ORAM");
    assert_eq!(PositionMap::from_bytes(&pm.to_bytes()).unwrap(), pm);
    for cut in [0, 3, 10, bytes.len() - 1] {
        assert!(OramTree::from_bytes(&bytes[..cut]).is_err());
    }
    let empty = Bucket::empty(3, 8).to_bytes().len();
    assert!(t.buckets.iter().all(|b| b.to_bytes().len() == empty));
}

#[test]
fn scheduled_leaves_are_reverse_lexicographic() {
    let seq: Vec<u32> = (0..8).map(|c| oram::scheduled_leaf(c, 3)).collect();
    assert_eq!(seq, vec![0, 4, 2, 6, 1, 5, 3, 7]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_compose_equals_serial(seed in any::<u64>(), n_plans in 1usize..=32, warm in 0usize..200) {
        let p = OramParams::new(64, 3, 8).unwrap();
        let (mut t, mut pm, mut r) = warmed(p, warm, seed);
        let start = t.clone();
        let mut plans = serial_plans(&mut t, &mut pm, &mut r, n_plans.div_ceil(3));
        plans.truncate(n_plans);
        let mut serial = start.clone();
        for pl in &plans {
            serial.apply_plan(pl).unwrap();
        }
        let perm = compose_batch(&plans, 8).unwrap();
        let mut batched = start.clone();
        apply_permutation(&mut batched, &perm).unwrap();
        prop_assert_eq!(&serial.buckets, &batched.buckets);
        prop_assert_eq!(&serial.stash, &batched.stash);
        batched.check_invariants(None).unwrap();
    }

    #[test]
    fn access_sequences_match_array(seed in any::<u64>(), n in 1u32..40, z in 1u32..5) {
        let p = OramParams::new(n, z, 4).unwrap();
        let mut r = rng(seed);
        let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
        let mut oracle = vec![vec![0u8; 4]; n as usize];
        for _ in 0..200 {
            let id = r.gen_range(0..n);
            let data = payload(&mut r, 4);
            let out = t.access(&mut pm, id, Op::Write(&data), &mut r).unwrap();
            prop_assert_eq!(&out.payload, &oracle[id as usize]);
            oracle[id as usize] = data;
            t.check_invariants(Some(&pm)).unwrap();
        }
    }
}
