//! Single-pass Circuit ORAM eviction.
//!
//! Positions along an eviction path are numbered `0` for the stash and
//! `d + 1` for the bucket at depth `d`.

use super::{Block, EvictionPlan, Move, OramTree, SlotLocator};

/// Longest common prefix of two `height`-bit leaf labels, MSB first: the
/// deepest bucket depth a block with `block_leaf` may occupy on the path.
pub fn legal_depth(block_leaf: u32, path_leaf: u32, height: u32) -> u32 {
    if height == 0 {
        return 0;
    }
    let x = (block_leaf ^ path_leaf) << (32 - height);
    x.leading_zeros().min(height)
}

/// Immutable snapshot of the stash and the buckets along one path.
pub struct PathView<'a> {
    pub leaf: u32,
    pub height: u32,
    pub positions: Vec<Vec<(SlotLocator, &'a Block)>>,
}

impl<'a> PathView<'a> {
    pub fn new(tree: &'a OramTree, leaf: u32) -> PathView<'a> {
        let p = &tree.params;
        let mut positions = Vec::with_capacity(p.height() as usize + 2);
        positions.push(
            tree.stash
                .iter()
                .enumerate()
                .map(|(k, b)| (SlotLocator::Stash(k as u32), b))
                .collect(),
        );
        for b in p.path_buckets(leaf) {
            positions.push(
                tree.buckets[b]
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(s, blk)| {
                        (
                            SlotLocator::Tree {
                                bucket: b as u32,
                                slot: s as u32,
                            },
                            blk,
                        )
                    })
                    .collect(),
            );
        }
        PathView {
            leaf,
            height: p.height(),
            positions,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    /// Deepest position a block may legally reach on this path.
    pub fn reach(&self, b: &Block) -> usize {
        legal_depth(b.leaf, self.leaf, self.height) as usize + 1
    }

    fn has_empty(&self, pos: usize) -> bool {
        self.positions[pos].iter().any(|(_, b)| b.is_dummy())
    }
}

/// Block in `pos` reaching furthest along the path; lowest slot wins ties.
/// Returns (slot index within the position, reach).
pub fn deepest_in_position(view: &PathView<'_>, pos: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for (k, (_, b)) in view.positions[pos].iter().enumerate() {
        if b.is_dummy() {
            continue;
        }
        let r = view.reach(b);
        if best.map_or(true, |(_, br)| r > br) {
            best = Some((k, r));
        }
    }
    best
}

/// `deepest[i]` is the source position of the block (from positions `< i`)
/// that can travel furthest and can reach at least position `i`.
pub fn prepare_deepest(view: &PathView<'_>) -> Vec<Option<usize>> {
    let n = view.num_positions();
    let mut deepest = vec![None; n];
    let mut goal: Option<usize> = None;
    let mut src: Option<usize> = None;
    for i in 0..n {
        if goal.is_some_and(|g| g >= i) {
            deepest[i] = src;
        }
        if let Some((_, r)) = deepest_in_position(view, i) {
            // Ties go to the later (deeper) position.
            if goal.map_or(true, |g| r >= g) {
                goal = Some(r);
                src = Some(i);
            }
        }
    }
    deepest
}

/// `target[i]` is the position the block picked up at position `i` is dropped at.
pub fn prepare_target(view: &PathView<'_>, deepest: &[Option<usize>]) -> Vec<Option<usize>> {
    let n = view.num_positions();
    let mut target = vec![None; n];
    let mut dest: Option<usize> = None;
    let mut src: Option<usize> = None;
    for i in (0..n).rev() {
        if src == Some(i) {
            target[i] = dest;
            dest = None;
            src = None;
        }
        let can_receive = i > 0 && ((dest.is_none() && view.has_empty(i)) || target[i].is_some());
        if can_receive {
            if let Some(s) = deepest[i] {
                src = Some(s);
                dest = Some(i);
            }
        }
    }
    target
}

/// One root-to-leaf pass holding at most one block in transit.
pub fn evict_onepass(tree: &OramTree, leaf: u32) -> EvictionPlan {
    let view = PathView::new(tree, leaf);
    let deepest = prepare_deepest(&view);
    let target = prepare_target(&view, &deepest);
    let n = view.num_positions();
    let mut moves = Vec::new();
    let mut hold: Option<(SlotLocator, Block)> = None;
    let mut dest: Option<usize> = None;
    for i in 0..n {
        let mut to_write = None;
        if hold.is_some() && dest == Some(i) {
            to_write = hold.take();
            dest = None;
        }
        let mut removed: Option<usize> = None;
        if let Some(t) = target[i] {
            let (k, _) = deepest_in_position(&view, i).expect("target set on empty position");
            let (loc, blk) = view.positions[i][k];
            removed = Some(k);
            hold = Some((loc, blk.clone()));
            dest = Some(t);
        }
        if let Some((from, block)) = to_write {
            let k = view.positions[i]
                .iter()
                .enumerate()
                .position(|(k, (_, b))| b.is_dummy() || removed == Some(k))
                .expect("target position has no free slot");
            moves.push(Move {
                from: Some(from),
                to: view.positions[i][k].0,
                block,
            });
        }
    }
    debug_assert!(hold.is_none());
    EvictionPlan {
        path_leaf: leaf,
        moves,
    }
}
