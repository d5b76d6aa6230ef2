//! Fixed circuit templates shared by both servers.
//!
//! Each template is generated deterministically from the layout, so the two
//! servers agree on circuits without exchanging them. Outputs are ordered
//! with the revealed bits first; everything after them stays in label form.
//! The eviction circuit evaluates exactly the plaintext rules in
//! `oct_core::oram::evict` (tie-breaking included).

use std::sync::Arc;

use oct_core::mpc::{Bit, BoolCircuit, CircuitBuilder, MpcError};
use oct_core::oram::Block;

use crate::layout::{Layout, INDEX_BITS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    /// Range check on the recombined index; derives every target block id.
    Verdict,
    /// Position map lookup and remap over an aligned range of `2^range_bits` ids.
    PosFetch { range_bits: u32 },
    /// Read-and-remap of one block on a path.
    Access,
    /// One single-pass eviction along a path.
    Evict,
}

#[derive(Clone, Debug)]
pub struct Template {
    pub kind: TemplateKind,
    pub circuit: Arc<BoolCircuit>,
    /// Leading outputs that are decoded and revealed to both servers.
    pub reveal: usize,
}

impl Template {
    pub fn num_a(&self) -> usize {
        self.circuit.num_inputs_a as usize
    }

    pub fn num_b(&self) -> usize {
        self.circuit.num_inputs_b as usize
    }
}

#[derive(Clone, Debug)]
pub struct Templates {
    pub layout: Layout,
    pub list: Vec<Template>,
}

impl Templates {
    pub fn build(layout: &Layout) -> Result<Templates, MpcError> {
        let mut list = vec![Template {
            kind: TemplateKind::Verdict,
            circuit: Arc::new(verdict(layout)?),
            reveal: 1,
        }];
        for l in 0..layout.depth {
            let range_bits = layout.depth - l;
            list.push(Template {
                kind: TemplateKind::PosFetch { range_bits },
                circuit: Arc::new(pos_fetch(layout, range_bits)?),
                reveal: layout.leaf_bits(),
            });
        }
        list.push(Template {
            kind: TemplateKind::Access,
            circuit: Arc::new(access(layout)?),
            reveal: 1,
        });
        list.push(Template {
            kind: TemplateKind::Evict,
            circuit: Arc::new(evict(layout)?),
            reveal: 0,
        });
        Ok(Templates {
            layout: *layout,
            list,
        })
    }

    pub const VERDICT: usize = 0;

    pub fn pos_fetch_id(&self, range_bits: u32) -> usize {
        1 + (self.layout.depth - range_bits) as usize
    }

    pub fn access_id(&self) -> usize {
        self.layout.depth as usize + 1
    }

    pub fn evict_id(&self) -> usize {
        self.layout.depth as usize + 2
    }

    pub fn get(&self, id: usize) -> &Template {
        &self.list[id]
    }

    /// How many instances of each template one allowed lookup consumes.
    pub fn usage_per_lookup(&self) -> Vec<usize> {
        let lay = &self.layout;
        let mut u = vec![0usize; self.list.len()];
        u[Self::VERDICT] = 1;
        for t in 0..lay.accesses() {
            let (_, bits) = lay.access_range(t);
            u[self.pos_fetch_id(bits)] += 1;
        }
        u[self.access_id()] = lay.accesses();
        u[self.evict_id()] = lay.accesses() * lay.params.evictions_per_access as usize;
        u
    }
}

/// Bit width of a path position number (0 = stash, `d + 1` = depth `d`).
fn pos_width(height: usize) -> usize {
    (usize::BITS - (height + 1).leading_zeros()) as usize
}

/// Unpacked view of one encoded slot.
struct Slot {
    valid: Bit,
    rest: Vec<Bit>,
}

impl Slot {
    fn split(bits: &[Bit]) -> Slot {
        Slot {
            valid: bits[0],
            rest: bits[1..].to_vec(),
        }
    }

    fn join(&self) -> Vec<Bit> {
        let mut v = Vec::with_capacity(self.rest.len() + 1);
        v.push(self.valid);
        v.extend_from_slice(&self.rest);
        v
    }
}

pub fn gt(b: &mut CircuitBuilder, x: &[Bit], y: &[Bit]) -> Bit {
    b.lt(y, x)
}

pub fn ge(b: &mut CircuitBuilder, x: &[Bit], y: &[Bit]) -> Bit {
    let l = b.lt(x, y);
    b.not(l)
}

/// `legal_depth(leaf, path) + 1` as a `width`-bit word. Leaves are compared
/// most significant bit first.
pub fn reach(b: &mut CircuitBuilder, leaf: &[Bit], path: &[Bit], width: usize) -> Vec<Bit> {
    let h = leaf.len();
    // thermo[d] = [lcp >= d + 1]
    let mut thermo = Vec::with_capacity(h);
    let mut run = Bit::ONE;
    for t in 0..h {
        let d = b.xor(leaf[h - 1 - t], path[h - 1 - t]);
        let e = b.not(d);
        run = b.and(run, e);
        thermo.push(run);
    }
    // one_hot[d] = [lcp == d]; XOR of neighbouring thermometer bits is free.
    let mut one_hot = Vec::with_capacity(h + 1);
    for d in 0..=h {
        let ge_d = if d == 0 { Bit::ONE } else { thermo[d - 1] };
        let ge_next = if d < h { thermo[d] } else { Bit::ZERO };
        one_hot.push(b.xor(ge_d, ge_next));
    }
    (0..width)
        .map(|j| {
            let mut acc = Bit::ZERO;
            for (d, oh) in one_hot.iter().enumerate() {
                if ((d + 1) >> j) & 1 == 1 {
                    acc = b.xor(acc, *oh);
                }
            }
            acc
        })
        .collect()
}

fn xor_many(b: &mut CircuitBuilder, words: &[Vec<Bit>]) -> Vec<Bit> {
    let mut acc = words[0].clone();
    for w in &words[1..] {
        acc = b.xor_word(&acc, w);
    }
    acc
}

/// Circuit ORAM eviction over `slots` (stash first, then buckets root to
/// leaf). Returns the rewritten slots.
pub fn evict_slots(
    b: &mut CircuitBuilder,
    lay: &Layout,
    path_leaf: &[Bit],
    slots: &[Vec<Bit>],
) -> Vec<Vec<Bit>> {
    let p = &lay.params;
    let height = lay.leaf_bits();
    let n = height + 2;
    let w = pos_width(height);
    let ib = lay.id_bits();
    let stash = p.stash_capacity as usize;
    let z = p.bucket_size as usize;
    let positions: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            if i == 0 {
                (0..stash).collect()
            } else {
                let s = stash + (i - 1) * z;
                (s..s + z).collect()
            }
        })
        .collect();
    let mut cur: Vec<Slot> = slots.iter().map(|s| Slot::split(s)).collect();
    let reaches: Vec<Vec<Bit>> = cur
        .iter()
        .map(|s| {
            let leaf = s.rest[ib..ib + height].to_vec();
            reach(b, &leaf, path_leaf, w)
        })
        .collect();

    // Deepest block within each position, lowest slot on ties.
    let mut best = Vec::with_capacity(n);
    let mut sel = Vec::with_capacity(n);
    let mut has = Vec::with_capacity(n);
    for pos in &positions {
        let mut bst = CircuitBuilder::const_word(0, w);
        let mut sl: Vec<Bit> = Vec::with_capacity(pos.len());
        for &k in pos {
            let g = gt(b, &reaches[k], &bst);
            let better = b.and(cur[k].valid, g);
            bst = b.mux_word(better, &reaches[k], &bst);
            let nb = b.not(better);
            for s in sl.iter_mut() {
                *s = b.and(*s, nb);
            }
            sl.push(better);
        }
        let valids: Vec<Bit> = pos.iter().map(|&k| cur[k].valid).collect();
        has.push(b.or_many(&valids));
        best.push(bst);
        sel.push(sl);
    }

    // prepare_deepest: goal 0 stands for "none" since every reach is >= 1.
    let mut goal = CircuitBuilder::const_word(0, w);
    let mut src = vec![Bit::ZERO; n];
    let mut deepest: Vec<Vec<Bit>> = Vec::with_capacity(n);
    let mut deepest_valid = Vec::with_capacity(n);
    for i in 0..n {
        let cond = if i == 0 {
            Bit::ZERO
        } else {
            let iw = CircuitBuilder::const_word(i as u64, w);
            ge(b, &goal, &iw)
        };
        deepest.push(src.iter().map(|s| b.and(cond, *s)).collect());
        deepest_valid.push(cond);
        let at_least = ge(b, &best[i], &goal);
        let upd = b.and(has[i], at_least);
        goal = b.mux_word(upd, &best[i], &goal);
        let nu = b.not(upd);
        for s in src.iter_mut().take(i) {
            *s = b.and(*s, nu);
        }
        src[i] = upd;
    }

    // prepare_target, scanning leaf to root.
    let mut src_t = vec![Bit::ZERO; n];
    let mut dest = vec![Bit::ZERO; n];
    let mut dest_set = Bit::ZERO;
    let mut target: Vec<Vec<Bit>> = vec![Vec::new(); n];
    let mut target_set = vec![Bit::ZERO; n];
    for i in (0..n).rev() {
        let hit = src_t[i];
        target[i] = dest.iter().map(|d| b.and(hit, *d)).collect();
        target_set[i] = hit;
        // A hit clears src and dest; both are one-hot so XOR does it for free.
        src_t[i] = Bit::ZERO;
        for j in 0..n {
            dest[j] = b.xor(dest[j], target[i][j]);
        }
        dest_set = b.xor(dest_set, hit);
        if i > 0 {
            let empties: Vec<Bit> = positions[i].iter().map(|&k| b.not(cur[k].valid)).collect();
            let empty = b.or_many(&empties);
            let free_dest = b.not(dest_set);
            let a = b.and(free_dest, empty);
            let can = b.or(a, hit);
            let upd = b.and(can, deepest_valid[i]);
            // When upd is set, src_t and dest are all zero.
            for j in 0..n {
                let t = b.and(upd, deepest[i][j]);
                src_t[j] = b.xor(src_t[j], t);
            }
            dest[i] = b.xor(dest[i], upd);
            dest_set = b.xor(dest_set, upd);
        }
    }

    // The single pass, holding at most one block.
    let body = lay.slot_bits() - 1;
    let mut hold = vec![Bit::ZERO; body];
    let mut hold_dest = vec![Bit::ZERO; n];
    for i in 0..n {
        let write = hold_dest[i];
        let t = target_set[i];
        let removed: Vec<Bit> = sel[i].iter().map(|s| b.and(t, *s)).collect();
        let picked_parts: Vec<Vec<Bit>> = positions[i]
            .iter()
            .zip(&removed)
            .map(|(&k, r)| b.and_word(*r, &cur[k].rest))
            .collect();
        let picked = xor_many(b, &picked_parts);
        for (&k, r) in positions[i].iter().zip(&removed) {
            cur[k].valid = b.xor(cur[k].valid, *r);
        }
        let mut any_free = Bit::ZERO;
        for &k in &positions[i] {
            let free = b.not(cur[k].valid);
            let nf = b.not(any_free);
            let first = b.and(free, nf);
            any_free = b.or(any_free, free);
            let wk = b.and(write, first);
            cur[k].rest = b.mux_word(wk, &hold, &cur[k].rest);
            cur[k].valid = b.xor(cur[k].valid, wk);
        }
        hold = b.mux_word(t, &picked, &hold);
        hold_dest[i] = Bit::ZERO;
        for j in 0..n {
            hold_dest[j] = b.xor(hold_dest[j], target[i][j]);
        }
    }
    cur.iter().map(Slot::join).collect()
}

fn split_slots(bits: &[Bit], lay: &Layout) -> Vec<Vec<Bit>> {
    bits.chunks(lay.slot_bits()).map(<[Bit]>::to_vec).collect()
}

/// A: path leaf. B: path slots. Outputs: rewritten slots.
pub fn evict(lay: &Layout) -> Result<BoolCircuit, MpcError> {
    let h = lay.leaf_bits() as u32;
    let nb = (lay.path_slots() * lay.slot_bits()) as u32;
    let mut b = CircuitBuilder::new(h, nb);
    let leaf = b.inputs_a(0, h);
    let slots = split_slots(&b.inputs_b(0, nb), lay);
    let out = evict_slots(&mut b, lay, &leaf, &slots);
    b.finish(&out.concat())
}

/// B: target id, new leaf, path slots.
/// Outputs: overflow (revealed), payload read, rewritten slots.
pub fn access(lay: &Layout) -> Result<BoolCircuit, MpcError> {
    let ib = lay.id_bits();
    let h = lay.leaf_bits();
    let d8 = 8 * lay.payload_len();
    let stash = lay.params.stash_capacity as usize;
    let nb = ib + h + lay.path_slots() * lay.slot_bits();
    let mut b = CircuitBuilder::new(0, nb as u32);
    let inp = b.inputs_b(0, nb as u32);
    let x = inp[..ib].to_vec();
    let new_leaf = inp[ib..ib + h].to_vec();
    let mut slots: Vec<Slot> = split_slots(&inp[ib + h..], lay)
        .iter()
        .map(|s| Slot::split(s))
        .collect();
    let mut parts = Vec::with_capacity(slots.len());
    for s in slots.iter_mut() {
        let eq = b.eq_word(&s.rest[..ib], &x);
        let m = b.and(s.valid, eq);
        parts.push(b.and_word(m, &s.rest[ib + h..]));
        s.valid = b.xor(s.valid, m);
    }
    let payload = xor_many(&mut b, &parts);
    let mut block = x.clone();
    block.extend_from_slice(&new_leaf);
    block.extend_from_slice(&payload);
    let mut any_free = Bit::ZERO;
    for s in slots.iter_mut().take(stash) {
        let free = b.not(s.valid);
        let nf = b.not(any_free);
        let first = b.and(free, nf);
        any_free = b.or(any_free, free);
        s.rest = b.mux_word(first, &block, &s.rest);
        s.valid = b.xor(s.valid, first);
    }
    let overflow = b.not(any_free);
    debug_assert_eq!(payload.len(), d8);
    let mut out = vec![overflow];
    out.extend_from_slice(&payload);
    for s in &slots {
        out.extend(s.join());
    }
    b.finish(&out)
}

/// A: garbler's leaf randomness. B: target id, evaluator's leaf randomness,
/// the `2^range_bits` position map entries of the range.
/// Outputs: old leaf (revealed), new leaf, rewritten entries.
pub fn pos_fetch(lay: &Layout, range_bits: u32) -> Result<BoolCircuit, MpcError> {
    let ib = lay.id_bits();
    let h = lay.leaf_bits();
    let r = 1usize << range_bits;
    let nb = ib + h + r * h;
    let mut b = CircuitBuilder::new(h as u32, nb as u32);
    let ra = b.inputs_a(0, h as u32);
    let inp = b.inputs_b(0, nb as u32);
    let x = &inp[..range_bits as usize];
    let rb = &inp[ib..ib + h];
    let entries: Vec<Vec<Bit>> = inp[ib + h..].chunks(h).map(<[Bit]>::to_vec).collect();
    let new_leaf = b.xor_word(&ra, rb);
    let sel = b.decode(x, r);
    let parts: Vec<Vec<Bit>> = sel
        .iter()
        .zip(&entries)
        .map(|(s, e)| b.and_word(*s, e))
        .collect();
    let old = xor_many(&mut b, &parts);
    let mut out = old;
    out.extend_from_slice(&new_leaf);
    for (s, e) in sel.iter().zip(&entries) {
        out.extend(b.mux_word(*s, &new_leaf, e));
    }
    b.finish(&out)
}

/// Target block id bits for every access, derived from the index bits.
pub fn target_words(b: &mut CircuitBuilder, lay: &Layout, index: &[Bit]) -> Vec<Vec<Bit>> {
    let ib = lay.id_bits();
    let h = lay.depth as usize;
    let mut out = Vec::with_capacity(lay.accesses());
    for l in 0..h {
        let off = lay.level_offset(l as u32) as u64;
        let low = h - l;
        // Sibling index (i >> l) ^ 1, placed at the level's aligned offset.
        let mut word: Vec<Bit> = (0..ib)
            .map(|q| if q < low { index[l + q] } else { Bit::Const((off >> q) & 1 == 1) })
            .collect();
        word[0] = b.not(word[0]);
        out.push(word);
    }
    for c in 0..lay.record_chunks {
        let base = ((2 + c) as u64) * lay.capacity as u64;
        out.push(
            (0..ib)
                .map(|q| if q < h { index[q] } else { Bit::Const((base >> q) & 1 == 1) })
                .collect(),
        );
    }
    out
}

/// A: index share, log size. B: index share.
/// Outputs: verdict (revealed), target ids, index, size.
pub fn verdict(lay: &Layout) -> Result<BoolCircuit, MpcError> {
    let ib = INDEX_BITS as u32;
    let mut b = CircuitBuilder::new(2 * ib, ib);
    let i2 = b.inputs_a(0, ib);
    let size = b.inputs_a(ib, ib);
    let i1 = b.inputs_b(0, ib);
    let index = b.xor_word(&i1, &i2);
    let allowed = b.lt(&index, &size);
    let targets = target_words(&mut b, lay, &index);
    let mut out = vec![allowed];
    for t in targets {
        out.extend(t);
    }
    out.extend_from_slice(&index);
    out.extend_from_slice(&size);
    b.finish(&out)
}

/// Small standalone gadgets built from the same helpers as the templates,
/// each with at most 8 input bits, for exhaustive checking.
pub fn gadgets() -> Vec<(&'static str, BoolCircuit)> {
    let mut v = Vec::new();

    let mut b = CircuitBuilder::new(4, 4);
    let (x, y) = (b.inputs_a(0, 4), b.inputs_b(0, 4));
    let o = b.lt(&x, &y);
    v.push(("comparator", b.finish(&[o]).unwrap()));

    let mut b = CircuitBuilder::new(4, 3);
    let s = b.input_a(0);
    let t = b.inputs_a(1, 3);
    let f = b.inputs_b(0, 3);
    let o = b.mux_word(s, &t, &f);
    v.push(("multiplexer", b.finish(&o).unwrap()));

    // Shares of a 4-bit index against the fixed bound 11.
    let mut b = CircuitBuilder::new(4, 4);
    let (i2, i1) = (b.inputs_a(0, 4), b.inputs_b(0, 4));
    let i = b.xor_word(&i1, &i2);
    let bound = CircuitBuilder::const_word(11, 4);
    let o = b.lt(&i, &bound);
    v.push(("range_check", b.finish(&[o]).unwrap()));

    let mut b = CircuitBuilder::new(4, 4);
    let (leaf, path) = (b.inputs_a(0, 4), b.inputs_b(0, 4));
    let o = reach(&mut b, &leaf, &path, pos_width(4));
    v.push(("reach", b.finish(&o).unwrap()));

    let mut b = CircuitBuilder::new(3, 0);
    let x = b.inputs_a(0, 3);
    let o = b.decode(&x, 8);
    v.push(("decoder", b.finish(&o).unwrap()));

    v
}

/// Plaintext slot encoding: valid, id, leaf (little-endian), payload bits.
pub fn encode_slot(lay: &Layout, blk: &Block) -> Vec<bool> {
    let mut v = Vec::with_capacity(lay.slot_bits());
    v.push(!blk.is_dummy());
    let (id, leaf) = if blk.is_dummy() { (0, 0) } else { (blk.id, blk.leaf) };
    v.extend((0..lay.id_bits()).map(|i| (id >> i) & 1 == 1));
    v.extend((0..lay.leaf_bits()).map(|i| (leaf >> i) & 1 == 1));
    for byte in &blk.payload {
        v.extend((0..8).map(|i| (byte >> i) & 1 == 1));
    }
    v
}

/// Inverse of `encode_slot`; slots with the valid bit clear decode to dummies.
pub fn decode_slot(lay: &Layout, bits: &[bool]) -> Block {
    if !bits[0] {
        return Block::dummy(lay.payload_len());
    }
    let word = |r: &[bool]| r.iter().rev().fold(0u32, |a, b| (a << 1) | *b as u32);
    let ib = lay.id_bits();
    let h = lay.leaf_bits();
    Block {
        id: word(&bits[1..1 + ib]),
        leaf: word(&bits[1 + ib..1 + ib + h]),
        payload: bits[1 + ib + h..]
            .chunks(8)
            .map(|c| c.iter().rev().fold(0u8, |a, b| (a << 1) | *b as u8))
            .collect(),
    }
}
