use std::collections::{BTreeMap, BTreeSet};

use super::{Block, EvictionPlan, OramError, OramTree, SlotLocator};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Move {
    /// `None` when the block is created by this move (first touch of a block id).
    pub from: Option<SlotLocator>,
    pub to: SlotLocator,
    /// Content written at `to`.
    pub block: Block,
}

impl Move {
    pub fn block_id(&self) -> u32 {
        self.block.id
    }
}

/// Net effect of a batch of plans: final content of every touched slot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreePermutation {
    pub updates: BTreeMap<SlotLocator, Block>,
}

impl TreePermutation {
    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// Permutation restoring the current contents of every slot `self` touches.
    pub fn inverse_for(&self, tree: &OramTree) -> Result<TreePermutation, OramError> {
        let mut updates = BTreeMap::new();
        for loc in self.updates.keys() {
            let b = tree.slot(*loc).ok_or(OramError::BadLocator(*loc))?;
            updates.insert(*loc, b.clone());
        }
        Ok(TreePermutation { updates })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Known {
    Empty,
    Holds(u32),
}

/// Collapse serially generated plans into one update per slot.
///
/// Plans are checked against each other: a move must find its block where the
/// earlier plans left it, and must land in a slot known (or assumed) empty.
pub fn compose_batch(plans: &[EvictionPlan], payload_len: usize) -> Result<TreePermutation, OramError> {
    let mut overlay: BTreeMap<SlotLocator, Block> = BTreeMap::new();
    // What each slot must have held before the batch, as implied by the plans.
    let mut assumed: BTreeMap<SlotLocator, Known> = BTreeMap::new();
    let mut moved: BTreeSet<u32> = BTreeSet::new();

    for plan in plans {
        for m in &plan.moves {
            if let Some(from) = m.from {
                match overlay.get(&from) {
                    Some(b) if b.id == m.block.id => {}
                    Some(_) => return Err(OramError::NonComposable(from)),
                    None => match assumed.get(&from) {
                        Some(Known::Holds(id)) if *id == m.block.id => {}
                        Some(_) => return Err(OramError::NonComposable(from)),
                        // A block already relocated by this batch cannot also be at its old place.
                        None if moved.contains(&m.block.id) => {
                            return Err(OramError::NonComposable(from))
                        }
                        None => {
                            assumed.insert(from, Known::Holds(m.block.id));
                        }
                    },
                }
            }
        }
        let mut cleared = Vec::new();
        for m in &plan.moves {
            if let Some(from) = m.from {
                cleared.push(from);
            }
        }
        for from in &cleared {
            overlay.insert(*from, Block::dummy(payload_len));
        }
        for m in &plan.moves {
            match overlay.get(&m.to) {
                Some(b) if b.is_dummy() => {}
                Some(_) => return Err(OramError::NonComposable(m.to)),
                None => match assumed.get(&m.to) {
                    Some(Known::Empty) | None => {
                        assumed.insert(m.to, Known::Empty);
                    }
                    Some(Known::Holds(_)) => return Err(OramError::NonComposable(m.to)),
                },
            }
            overlay.insert(m.to, m.block.clone());
            moved.insert(m.block.id);
        }
    }
    Ok(TreePermutation { updates: overlay })
}

pub fn apply_permutation(tree: &mut OramTree, perm: &TreePermutation) -> Result<(), OramError> {
    for loc in perm.updates.keys() {
        tree.slot(*loc).ok_or(OramError::BadLocator(*loc))?;
    }
    for (loc, b) in &perm.updates {
        *tree.slot_mut(*loc).unwrap() = b.clone();
    }
    Ok(())
}
