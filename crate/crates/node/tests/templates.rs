//! The garbled templates against the plaintext ORAM they mirror.

use oct_core::oram::{self, path_locators, Block, OramParams, Op, OramTree, PositionMap};
use oct_node::layout::Layout;
use oct_node::templates::{decode_slot, encode_slot, gadgets, Templates};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout(n: u32, z: u32, stash: u32) -> Layout {
    let p = OramParams::new(n, z, 32).unwrap().with_stash(stash).unwrap();
    Layout::new(p, 2).unwrap()
}

fn bits(v: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| (v >> i) & 1 == 1).collect()
}

fn word(b: &[bool]) -> u64 {
    b.iter().rev().fold(0, |a, x| (a << 1) | *x as u64)
}

/// A tree after `warm` random accesses.
fn random_state(lay: &Layout, warm: usize, seed: u64) -> (OramTree, PositionMap, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tree, mut pm) = oram::init(lay.params, &mut rng).unwrap();
    for _ in 0..warm {
        let id = rng.gen_range(0..lay.params.num_blocks);
        let data: Vec<u8> = (0..lay.payload_len()).map(|_| rng.gen()).collect();
        tree.access(&mut pm, id, Op::Write(&data), &mut rng).unwrap();
    }
    (tree, pm, rng)
}

fn path_bits(lay: &Layout, tree: &OramTree, leaf: u32) -> Vec<bool> {
    path_locators(&lay.params, leaf)
        .into_iter()
        .flat_map(|l| encode_slot(lay, tree.slot(l).unwrap()))
        .collect()
}

fn path_blocks(lay: &Layout, tree: &OramTree, leaf: u32) -> Vec<Block> {
    path_locators(&lay.params, leaf)
        .into_iter()
        .map(|l| tree.slot(l).unwrap().clone())
        .collect()
}

fn decode_path(lay: &Layout, b: &[bool]) -> Vec<Block> {
    b.chunks(lay.slot_bits()).map(|s| decode_slot(lay, s)).collect()
}

fn check_evict(lay: &Layout, t: &Templates, warm: usize, seed: u64) {
    let (tree, _, mut rng) = random_state(lay, warm, seed);
    let leaf = rng.gen_range(0..lay.params.num_leaves());
    let c = &t.get(t.evict_id()).circuit;
    let out = c
        .eval(&bits(leaf as u64, lay.leaf_bits()), &path_bits(lay, &tree, leaf))
        .unwrap();
    let mut expect = tree.clone();
    let plan = oram::evict_onepass(&tree, leaf);
    expect.apply_plan(&plan).unwrap();
    assert_eq!(decode_path(lay, &out), path_blocks(lay, &expect, leaf), "seed {seed}");
}

#[test]
fn evict_matches_plaintext_small() {
    let lay = layout(64, 2, 6);
    let t = Templates::build(&lay).unwrap();
    for seed in 0..200 {
        check_evict(&lay, &t, (seed % 40) as usize, seed);
    }
}

#[test]
fn access_matches_plan_read() {
    let lay = layout(64, 3, 8);
    let t = Templates::build(&lay).unwrap();
    let c = &t.get(t.access_id()).circuit;
    for seed in 0..200u64 {
        let (tree, pm, mut rng) = random_state(&lay, 30, seed);
        let id = rng.gen_range(0..lay.params.num_blocks);
        let read_leaf = pm.get(id);
        let new_leaf = rng.gen_range(0..lay.params.num_leaves());
        let mut inp = bits(id as u64, lay.id_bits());
        inp.extend(bits(new_leaf as u64, lay.leaf_bits()));
        inp.extend(path_bits(&lay, &tree, read_leaf));
        let out = c.eval(&[], &inp).unwrap();
        let (prior, plan) = tree.plan_read(id, read_leaf, new_leaf, None).unwrap();
        assert!(!out[0]);
        let d8 = 8 * lay.payload_len();
        let payload: Vec<u8> = out[1..1 + d8]
            .chunks(8)
            .map(|b| word(b) as u8)
            .collect();
        assert_eq!(payload, prior);
        let mut expect = tree.clone();
        expect.apply_plan(&plan).unwrap();
        assert_eq!(decode_path(&lay, &out[1 + d8..]), path_blocks(&lay, &expect, read_leaf));
    }
}

#[test]
fn access_reports_overflow() {
    let lay = layout(64, 2, 2);
    let t = Templates::build(&lay).unwrap();
    let c = &t.get(t.access_id()).circuit;
    let mut tree = OramTree::new(lay.params);
    for (k, s) in tree.stash.iter_mut().enumerate() {
        *s = Block { id: 10 + k as u32, leaf: 0, payload: vec![1; 32] };
    }
    let mut inp = bits(3, lay.id_bits());
    inp.extend(bits(0, lay.leaf_bits()));
    inp.extend(path_bits(&lay, &tree, 0));
    assert!(c.eval(&[], &inp).unwrap()[0]);
}

#[test]
fn verdict_and_targets() {
    let lay = layout(256, 3, 8);
    let t = Templates::build(&lay).unwrap();
    let c = &t.get(Templates::VERDICT).circuit;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let size: u32 = rng.gen_range(0..=lay.capacity);
        let i: u32 = if rng.gen() { rng.gen_range(0..lay.capacity) } else { rng.gen() };
        let i1: u32 = rng.gen();
        let mut a = bits((i ^ i1) as u64, 32);
        a.extend(bits(size as u64, 32));
        let out = c.eval(&a, &bits(i1 as u64, 32)).unwrap();
        assert_eq!(out[0], i < size);
        if i < lay.capacity {
            let ib = lay.id_bits();
            let got: Vec<u32> = out[1..1 + ib * lay.accesses()]
                .chunks(ib)
                .map(|w| word(w) as u32)
                .collect();
            assert_eq!(got, lay.targets(i));
        }
        let tail = &out[1 + lay.id_bits() * lay.accesses()..];
        assert_eq!(word(&tail[..32]) as u32, i);
        assert_eq!(word(&tail[32..]) as u32, size);
    }
}

#[test]
fn pos_fetch_reads_and_remaps() {
    let lay = layout(256, 3, 8);
    let t = Templates::build(&lay).unwrap();
    let h = lay.leaf_bits();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for acc in 0..lay.accesses() {
        let (start, rb) = lay.access_range(acc);
        let c = &t.get(t.pos_fetch_id(rb)).circuit;
        let r = 1u32 << rb;
        for _ in 0..20 {
            let entries: Vec<u32> = (0..r).map(|_| rng.gen_range(0..lay.params.num_leaves())).collect();
            let x = start + rng.gen_range(0..r);
            let (ra, rbv) = (rng.gen_range(0..1u64 << h), rng.gen_range(0..1u64 << h));
            let mut inp = bits(x as u64, lay.id_bits());
            inp.extend(bits(rbv, h));
            for e in &entries {
                inp.extend(bits(*e as u64, h));
            }
            let out = c.eval(&bits(ra, h), &inp).unwrap();
            assert_eq!(word(&out[..h]) as u32, entries[(x - start) as usize]);
            let new = word(&out[h..2 * h]);
            assert_eq!(new, ra ^ rbv);
            for (j, e) in out[2 * h..].chunks(h).enumerate() {
                let want = if j as u32 == x - start { new } else { entries[j] as u64 };
                assert_eq!(word(e), want);
            }
        }
    }
}

#[test]
fn gadgets_exhaustive() {
    for (name, c) in gadgets() {
        let (na, nb) = (c.num_inputs_a as usize, c.num_inputs_b as usize);
        assert!(na + nb <= 8, "{name}");
        for v in 0u64..1 << (na + nb) {
            let a = bits(v, na);
            let b = bits(v >> na, nb);
            let out = c.eval(&a, &b).unwrap();
            let (x, y) = (word(&a), word(&b));
            let want: Vec<bool> = match name {
                "comparator" => vec![x < y],
                "multiplexer" => bits(if a[0] { x >> 1 } else { y }, 3),
                "range_check" => vec![(x ^ y) < 11],
                "reach" => bits(oram::legal_depth(x as u32, y as u32, 4) as u64 + 1, out.len()),
                "decoder" => (0..8).map(|j| j == x).collect(),
                _ => panic!("unknown gadget {name}"),
            };
            assert_eq!(out, want, "{name} on {v:#x}");
        }
    }
}

#[test]
fn template_sizes_at_scale() {
    let p = OramParams::new(2048, 3, 32).unwrap().with_stash(16).unwrap();
    let lay = Layout::new(p, 3).unwrap();
    let t = Templates::build(&lay).unwrap();
    let usage = t.usage_per_lookup();
    let total: usize = t.list.iter().zip(&usage).map(|(x, u)| x.circuit.num_and() * u).sum();
    for x in &t.list {
        eprintln!("{:?}: {} AND", x.kind, x.circuit.num_and());
    }
    eprintln!("per lookup: {total} AND");
    assert!(total < 2_000_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn evict_matches_plaintext_random(warm in 0usize..120, seed in any::<u64>()) {
        let lay = layout(64, 2, 10);
        let t = Templates::build(&lay).unwrap();
        check_evict(&lay, &t, warm, seed);
    }
}
