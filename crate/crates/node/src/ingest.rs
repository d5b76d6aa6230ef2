//! Trusted-dealer bootstrap: build the log, lay it out in a plaintext ORAM,
//! and split the result into the two servers' label states.

use std::collections::BTreeMap;
use std::path::Path;

use oct_core::merkle::{CertificateRecord, Digest, MerkleLog};
use oct_core::oram::{self, Op, OramTree, PositionMap};
use rand::RngCore;

use crate::dictionary::Dictionary;
use crate::labels::{encode_pair, state_file, LabelState, Role};
use crate::layout::Layout;
use crate::NodeError;

pub struct Ingested {
    pub log: MerkleLog,
    pub tree: OramTree,
    pub posmap: PositionMap,
    pub index: LabelState,
    pub data: LabelState,
    pub dictionary: Dictionary,
}

pub fn build<R: RngCore>(
    layout: &Layout,
    records: &[CertificateRecord],
    rng: &mut R,
) -> Result<Ingested, NodeError> {
    if records.len() > layout.capacity as usize {
        return Err(NodeError::Config(format!(
            "{} records exceed log capacity {} (N = {})",
            records.len(),
            layout.capacity,
            layout.params.num_blocks
        )));
    }
    let log = MerkleLog::from_records(layout.capacity as u64, records)?;
    let (mut tree, mut posmap) = oram::init(layout.params, rng)?;
    for l in 0..layout.depth {
        for j in 0..(layout.capacity >> l) {
            let payload = layout.node_payload(&log.get(l, j as u64));
            tree.access(&mut posmap, layout.node_block(l, j), Op::Write(&payload), rng)?;
        }
    }
    for (i, r) in records.iter().enumerate() {
        for (c, chunk) in layout.encode_record(r)?.iter().enumerate() {
            tree.access(&mut posmap, layout.chunk_block(c as u32, i as u32), Op::Write(chunk), rng)?;
        }
    }
    let root = log.capacity_root();
    let size = records.len() as u32;
    let (index, data) = encode_pair(layout, &tree, &posmap, size, root, rng);
    // Later records for the same domain supersede earlier ones.
    let entries: BTreeMap<String, u32> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.domain.clone(), i as u32))
        .collect();
    let dictionary = Dictionary {
        root,
        capacity: layout.capacity,
        size,
        payload_len: layout.params.payload_len,
        record_chunks: layout.record_chunks,
        entries,
    };
    Ok(Ingested {
        log,
        tree,
        posmap,
        index,
        data,
        dictionary,
    })
}

/// Write `index.state`, `data.state` and `dictionary.txt` into `dir`.
pub fn write_outputs(ing: &Ingested, dir: &Path) -> Result<(), NodeError> {
    std::fs::create_dir_all(dir)?;
    ing.index.save(&state_file(dir, Role::Index))?;
    ing.data.save(&state_file(dir, Role::Data))?;
    std::fs::write(dir.join("dictionary.txt"), ing.dictionary.to_text())?;
    Ok(())
}

pub fn ingest_file<R: RngCore>(
    layout: &Layout,
    input: &Path,
    out_dir: &Path,
    rng: &mut R,
) -> Result<Digest, NodeError> {
    let f = std::fs::File::open(input)
        .map_err(|e| NodeError::Config(format!("cannot open {}: {e}", input.display())))?;
    let records = oct_core::merkle::parse_ingest(std::io::BufReader::new(f))?;
    let ing = build(layout, &records, rng)?;
    write_outputs(&ing, out_dir)?;
    Ok(ing.dictionary.root)
}
