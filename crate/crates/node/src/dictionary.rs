//! The public domain dictionary clients download out of band.
//!
//! Text format: `#` comments, header lines `root HEX`, `capacity C`,
//! `size N`, `payload_len D`, `record_chunks K`, then one `domain index` line
//! per record, sorted by domain.

use std::collections::BTreeMap;
use std::path::Path;

use oct_core::merkle::{tree_depth, Digest};

use crate::NodeError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    pub root: Digest,
    pub capacity: u32,
    pub size: u32,
    pub payload_len: u32,
    pub record_chunks: u32,
    pub entries: BTreeMap<String, u32>,
}

impl Dictionary {
    pub fn depth(&self) -> u32 {
        tree_depth(self.capacity as u64)
    }

    pub fn index_of(&self, domain: &str) -> Option<u32> {
        self.entries.get(domain).copied()
    }

    /// Bytes in a share response bundle.
    pub fn bundle_len(&self) -> usize {
        crate::layout::BUNDLE_HEADER
            + 32 * self.depth() as usize
            + (self.record_chunks * self.payload_len) as usize
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# oct domain dictionary\n");
        s += &format!("root {}\n", self.root.to_hex());
        s += &format!("capacity {}\n", self.capacity);
        s += &format!("size {}\n", self.size);
        s += &format!("payload_len {}\n", self.payload_len);
        s += &format!("record_chunks {}\n", self.record_chunks);
        for (d, i) in &self.entries {
            s += &format!("{d} {i}\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Dictionary, NodeError> {
        let bad = |n: usize, m: &str| NodeError::Config(format!("dictionary line {}: {m}", n + 1));
        let mut root = None;
        let mut nums: BTreeMap<&str, u32> = BTreeMap::new();
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(n, "expected two fields"))?;
            let v = v.trim();
            match k {
                "root" => root = Some(Digest::from_hex(v).ok_or_else(|| bad(n, "bad root"))?),
                "capacity" | "size" | "payload_len" | "record_chunks" => {
                    nums.insert(k, v.parse().map_err(|_| bad(n, "bad number"))?);
                }
                domain => {
                    let i: u32 = v.parse().map_err(|_| bad(n, "bad index"))?;
                    entries.insert(domain.to_string(), i);
                }
            }
        }
        let get = |k: &str| nums.get(k).copied().ok_or_else(|| NodeError::Config(format!("dictionary lacks {k}")));
        let d = Dictionary {
            root: root.ok_or_else(|| NodeError::Config("dictionary lacks root".into()))?,
            capacity: get("capacity")?,
            size: get("size")?,
            payload_len: get("payload_len")?,
            record_chunks: get("record_chunks")?,
            entries,
        };
        if !d.capacity.is_power_of_two() || d.size > d.capacity {
            return Err(NodeError::Config("dictionary capacity/size inconsistent".into()));
        }
        if d.entries.values().any(|i| *i >= d.size) {
            return Err(NodeError::Config("dictionary index beyond log size".into()));
        }
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Dictionary, NodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NodeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Dictionary::parse(&text)
    }
}
