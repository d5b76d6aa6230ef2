//! Per-query stage tracking and the instrumentation trace.

use std::sync::{Arc, Mutex};

use oct_core::mpc::Commitment;

use crate::wire::{QueryEnvelope, QUERY_ID_LEN};
use crate::NodeError;

/// The nine stages of a lookup. Servers run 1 through 8; the client runs 9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Received = 1,
    Verdict = 2,
    Positions = 3,
    Fetch = 4,
    Permutation = 5,
    Applied = 6,
    Shares = 7,
    Sent = 8,
    Recombined = 9,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    pub envelope: QueryEnvelope,
    pub stage: Stage,
    pub verdict: Option<Verdict>,
}

impl SessionState {
    pub fn new(envelope: QueryEnvelope) -> SessionState {
        SessionState {
            envelope,
            stage: Stage::Received,
            verdict: None,
        }
    }

    pub fn query_id(&self) -> [u8; QUERY_ID_LEN] {
        self.envelope.query_id
    }

    pub fn commitment(&self) -> Commitment {
        self.envelope.commitment
    }

    /// Move forward to `to`. Stages never go backwards, and nothing past the
    /// verdict happens before a verdict is recorded. Denied sessions jump
    /// straight from the verdict to the response.
    pub fn advance(&mut self, to: Stage) -> Result<(), NodeError> {
        if to < self.stage {
            return Err(NodeError::Protocol(format!(
                "stage regression {:?} -> {to:?}",
                self.stage
            )));
        }
        if to > Stage::Verdict && self.verdict.is_none() {
            return Err(NodeError::Protocol(format!("{to:?} before verdict")));
        }
        if self.verdict == Some(Verdict::Deny) && to > Stage::Verdict && to < Stage::Shares {
            return Err(NodeError::Protocol("denied session cannot touch the ORAM".into()));
        }
        self.stage = to;
        Ok(())
    }

    pub fn set_verdict(&mut self, v: Verdict) -> Result<(), NodeError> {
        self.advance(Stage::Verdict)?;
        self.verdict = Some(v);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Stage {
        query_id: [u8; QUERY_ID_LEN],
        stage: Stage,
    },
    /// Read path of one access, as seen by this server.
    PathRead { epoch: u64, leaf: u32 },
    Evict { epoch: u64, leaf: u32 },
    BatchApplied {
        epoch: u64,
        sessions: usize,
        slots_written: usize,
        max_writes_per_slot: usize,
    },
}

/// Shared, append-only event log. A disabled trace drops every event.
#[derive(Clone, Debug)]
pub struct Trace(Option<Arc<Mutex<Vec<TraceEvent>>>>);

impl Default for Trace {
    fn default() -> Self {
        Trace(Some(Arc::default()))
    }
}

impl Trace {
    pub fn disabled() -> Trace {
        Trace(None)
    }

    pub fn push(&self, e: TraceEvent) {
        if let Some(t) = &self.0 {
            t.lock().unwrap().push(e);
        }
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.0.as_ref().map(|t| t.lock().unwrap().clone()).unwrap_or_default()
    }

    pub fn clear(&self) {
        if let Some(t) = &self.0 {
            t.lock().unwrap().clear();
        }
    }

    pub fn stage(&self, s: &SessionState) {
        self.push(TraceEvent::Stage {
            query_id: s.query_id(),
            stage: s.stage,
        });
    }

    pub fn path_reads(&self) -> Vec<u32> {
        self.events()
            .iter()
            .filter_map(|e| match e {
                TraceEvent::PathRead { leaf, .. } => Some(*leaf),
                _ => None,
            })
            .collect()
    }
}

/// Check the ordering rules over a trace: every send follows its verdict, and
/// once batch `e` has been applied, paths are only read for batch `e + 1`.
pub fn check_ordering(events: &[TraceEvent]) -> Result<(), String> {
    use std::collections::HashMap;
    let mut verdicts: HashMap<[u8; QUERY_ID_LEN], usize> = HashMap::new();
    let mut applied: Option<u64> = None;
    for (pos, e) in events.iter().enumerate() {
        match e {
            TraceEvent::Stage { query_id, stage } => match stage {
                Stage::Verdict => {
                    verdicts.insert(*query_id, pos);
                }
                Stage::Sent if !verdicts.contains_key(query_id) => {
                    return Err(format!("event {pos}: send before verdict"));
                }
                _ => {}
            },
            TraceEvent::PathRead { epoch, .. } | TraceEvent::Evict { epoch, .. } => {
                if let Some(a) = applied {
                    if *epoch != a + 1 {
                        return Err(format!("event {pos}: epoch {epoch} path after batch {a} applied"));
                    }
                }
            }
            TraceEvent::BatchApplied { epoch, max_writes_per_slot, .. } => {
                if *max_writes_per_slot > 1 {
                    return Err(format!("event {pos}: slot written {max_writes_per_slot} times"));
                }
                applied = Some(*epoch);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> SessionState {
        SessionState::new(QueryEnvelope {
            query_id: [1; 16],
            commitment: Commitment([2; 32]),
            index_share: [0; 4],
            batch_epoch: 0,
        })
    }

    #[test]
    fn stages_are_monotone() {
        let mut s = session();
        assert!(s.advance(Stage::Positions).is_err());
        s.set_verdict(Verdict::Allow).unwrap();
        s.advance(Stage::Fetch).unwrap();
        assert!(s.advance(Stage::Positions).is_err());
        s.advance(Stage::Sent).unwrap();
    }

    #[test]
    fn denied_sessions_skip_the_oram() {
        let mut s = session();
        s.set_verdict(Verdict::Deny).unwrap();
        assert!(s.advance(Stage::Fetch).is_err());
        s.advance(Stage::Shares).unwrap();
        s.advance(Stage::Sent).unwrap();
    }
}
