//! Both engines in one process over an in-memory channel. Used by tests and
//! by experiments that need the servers' internal views.

use std::sync::Arc;

use oct_core::mpc::Delta;

use crate::client::{recombine, PreparedQuery, VerifiedProof};
use crate::dictionary::Dictionary;
use crate::engine::{bundle_share, Capture, Engine, Evaluator, Garbler, Outcome};
use crate::labels::LabelState;
use crate::pools::PoolSet;
use crate::session::SessionState;
use crate::templates::Templates;
use crate::wire::{Channel, ShareResponse};
use crate::NodeError;

pub struct LocalPair {
    pub index: Engine,
    pub data: Engine,
    pub index_pools: PoolSet,
    pub data_pools: PoolSet,
    pub dictionary: Dictionary,
    ch_index: Channel,
    ch_data: Channel,
}

/// What each server would send for one query.
#[derive(Clone, Debug)]
pub struct LocalResult {
    pub data_share: Option<Vec<u8>>,
    pub index_share: Option<Vec<u8>>,
    pub verified: Result<VerifiedProof, String>,
}

impl LocalPair {
    pub fn new(index: LabelState, data: LabelState, dictionary: Dictionary, seed: u64) -> Result<LocalPair, NodeError> {
        let templates = Arc::new(Templates::build(&index.layout)?);
        let delta: Delta = index
            .delta
            .ok_or_else(|| NodeError::State("index state lacks delta".into()))?;
        let mut s_index = [0u8; 32];
        s_index[..8].copy_from_slice(&seed.to_be_bytes());
        let mut s_data = s_index;
        s_data[31] = 1;
        let index_pools = PoolSet::garbler(&templates, delta, s_index, index.epoch, 0, 0);
        let data_pools = PoolSet::evaluator(s_data, data.epoch, 0);
        let g = Garbler {
            templates: templates.clone(),
            pool: index_pools.pool.clone(),
            delta,
        };
        let e = Evaluator {
            templates: templates.clone(),
            pool: data_pools.pool.clone(),
        };
        let (ch_index, ch_data) = Channel::mem_pair();
        Ok(LocalPair {
            index: Engine::new(index, templates.clone(), Box::new(g), s_index),
            data: Engine::new(data, templates, Box::new(e), s_data),
            index_pools,
            data_pools,
            dictionary,
            ch_index,
            ch_data,
        })
    }

    pub fn capture(&mut self) -> (Capture, Capture) {
        let a = Capture::default();
        let b = Capture::default();
        self.index.capture = Some(a.clone());
        self.data.capture = Some(b.clone());
        (a, b)
    }

    /// Run one batch through both engines and recombine every answer.
    pub fn run_batch(&mut self, queries: &[PreparedQuery]) -> Result<Vec<LocalResult>, NodeError> {
        let mut s_index: Vec<SessionState> = queries.iter().map(|q| SessionState::new(q.envelopes[1].clone())).collect();
        let mut s_data: Vec<SessionState> = queries.iter().map(|q| SessionState::new(q.envelopes[0].clone())).collect();
        let (index, data) = (&mut self.index, &mut self.data);
        let (ci, cd) = (&mut self.ch_index, &mut self.ch_data);
        let (ri, rd) = std::thread::scope(|sc| {
            let h = sc.spawn(|| data.process_batch(cd, &mut s_data));
            let ri = index.process_batch(ci, &mut s_index);
            (ri, h.join().expect("data engine panicked"))
        });
        let (oi, od) = (ri?, rd?);
        let lay = self.index.state.layout;
        Ok(queries
            .iter()
            .zip(oi.iter().zip(&od))
            .map(|(q, pair)| match pair {
                (Outcome::Allowed(a), Outcome::Allowed(b)) => {
                    let ds = bundle_share(&lay, b);
                    let is = bundle_share(&lay, a);
                    let ra = ShareResponse { query_id: q.query_id, share_index: 1, proof_share: ds.clone() };
                    let rb = ShareResponse { query_id: q.query_id, share_index: 2, proof_share: is.clone() };
                    LocalResult {
                        verified: recombine(&self.dictionary, q, &ra, &rb).map_err(|e| e.to_string()),
                        data_share: Some(ds),
                        index_share: Some(is),
                    }
                }
                (Outcome::Denied, Outcome::Denied) => LocalResult {
                    data_share: None,
                    index_share: None,
                    verified: Err("denied".into()),
                },
                _ => LocalResult {
                    data_share: None,
                    index_share: None,
                    verified: Err("servers disagree on the verdict".into()),
                },
            })
            .collect())
    }
}
