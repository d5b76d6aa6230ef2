//! The two-server batch executor (stages 2 through 6).
//!
//! Both servers run the same schedule in lock step; the only difference is
//! the [`Party`] that drives each circuit. Public values revealed along the
//! way are the verdict bit, each access's read leaf and the stash overflow
//! flag. Everything else stays in label form and is written to an overlay
//! that is committed once per batch.

use std::sync::{Arc, Mutex};

use oct_core::mpc::{
    decode, evaluate, Delta, GarbledCircuit, OtMessage, OtReceiver, OtSender, PrecomputePool, WireLabel,
};
use oct_core::oram::{path_locators, scheduled_leaf};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::labels::{LabelState, Role};
use crate::layout::{Layout, INDEX_BITS};
use crate::pools::derive_rng;
use crate::session::{SessionState, Stage, Trace, TraceEvent, Verdict};
use crate::templates::Templates;
use crate::wire::{kind, pack_bits, put_labels, unpack_bits, Channel, Reader};
use crate::NodeError;

fn bits_of(v: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| (v >> i) & 1 == 1).collect()
}

fn word_of(bits: &[bool]) -> u32 {
    bits.iter().rev().fold(0, |a, b| (a << 1) | *b as u32)
}

/// One side of the garbled-circuit protocol.
pub trait Party: Send {
    fn role(&self) -> Role;

    /// Registers for `n` evaluator-chosen bits. Only the evaluator's
    /// `choices` are used; the garbler passes an empty slice.
    fn ot_registers(
        &mut self,
        ch: &mut Channel,
        n: usize,
        choices: &[bool],
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<u128>, NodeError>;

    /// Run one template. `a_bits` are the garbler's plaintext inputs (empty on
    /// the evaluator), `b` the input registers. Returns the revealed outputs
    /// and the registers holding the remaining outputs.
    fn run(
        &mut self,
        ch: &mut Channel,
        template: usize,
        a_bits: &[bool],
        b: &[u128],
    ) -> Result<(Vec<bool>, Vec<u128>), NodeError>;
}

pub struct Garbler {
    pub templates: Arc<Templates>,
    pub pool: Arc<PrecomputePool>,
    pub delta: Delta,
}

impl Party for Garbler {
    fn role(&self) -> Role {
        Role::Index
    }

    fn ot_registers(
        &mut self,
        ch: &mut Channel,
        n: usize,
        _choices: &[bool],
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<u128>, NodeError> {
        let (setup, msg) = OtSender::setup(self.pool.take_exp().item);
        ch.send(kind::OT_SETUP, msg.to_bytes())?;
        let choice = OtMessage::from_bytes(&ch.expect(kind::OT_CHOICE)?)?;
        let d = self.delta.value();
        let zeros: Vec<u128> = (0..n).map(|_| rng.gen()).collect();
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = zeros
            .iter()
            .map(|z| (z.to_le_bytes().to_vec(), (z ^ d).to_le_bytes().to_vec()))
            .collect();
        let transfer = setup.transfer(&choice, &pairs)?;
        ch.send(kind::OT_TRANSFER, transfer.to_bytes())?;
        Ok(zeros)
    }

    fn run(
        &mut self,
        ch: &mut Channel,
        template: usize,
        a_bits: &[bool],
        b: &[u128],
    ) -> Result<(Vec<bool>, Vec<u128>), NodeError> {
        let tpl = self.templates.get(template);
        if a_bits.len() != tpl.num_a() || b.len() != tpl.num_b() {
            return Err(NodeError::Protocol(format!("template {template}: input size mismatch")));
        }
        let pooled = self.pool.take_circuit(template);
        let g = pooled.item;
        let d = self.delta.value();
        let na = tpl.num_a();
        let mut hdr = Vec::with_capacity(34 + 16 * (na + b.len()) + tpl.reveal / 8 + 1);
        hdr.extend_from_slice(&(template as u16).to_be_bytes());
        hdr.extend_from_slice(&pooled.seq.to_be_bytes());
        hdr.extend_from_slice(&g.gc.tweak_base.to_be_bytes());
        let a_labels: Vec<u128> = a_bits
            .iter()
            .zip(&g.input_zero)
            .map(|(bit, z)| if *bit { z.0 ^ d } else { z.0 })
            .collect();
        put_labels(&mut hdr, &a_labels);
        let translations: Vec<u128> = b.iter().zip(&g.input_zero[na..]).map(|(r, z)| r ^ z.0).collect();
        put_labels(&mut hdr, &translations);
        hdr.extend(pack_bits(&g.gc.output_decoding[..tpl.reveal]));
        ch.send(kind::GC_HEADER, hdr)?;
        ch.send(kind::GC_TABLES, g.gc.garbled_tables)?;
        let revealed = if tpl.reveal > 0 {
            unpack_bits(&ch.expect(kind::EVAL_RESULT)?, tpl.reveal)?
        } else {
            Vec::new()
        };
        let regs = g.output_zero[tpl.reveal..].iter().map(|l| l.0).collect();
        Ok((revealed, regs))
    }
}

pub struct Evaluator {
    pub templates: Arc<Templates>,
    pub pool: Arc<PrecomputePool>,
}

impl Party for Evaluator {
    fn role(&self) -> Role {
        Role::Data
    }

    fn ot_registers(
        &mut self,
        ch: &mut Channel,
        n: usize,
        choices: &[bool],
        _rng: &mut ChaCha12Rng,
    ) -> Result<Vec<u128>, NodeError> {
        if choices.len() != n {
            return Err(NodeError::Protocol("OT choice count".into()));
        }
        let setup = OtMessage::from_bytes(&ch.expect(kind::OT_SETUP)?)?;
        let exps = (0..n).map(|_| self.pool.take_exp().item).collect();
        let (receiver, msg) = OtReceiver::choose(&setup, choices, exps)?;
        ch.send(kind::OT_CHOICE, msg.to_bytes())?;
        let transfer = OtMessage::from_bytes(&ch.expect(kind::OT_TRANSFER)?)?;
        receiver
            .receive(&transfer)?
            .into_iter()
            .map(|m| {
                let b: [u8; 16] = m
                    .try_into()
                    .map_err(|_| NodeError::Protocol("OT message is not a label".into()))?;
                Ok(u128::from_le_bytes(b))
            })
            .collect()
    }

    fn run(
        &mut self,
        ch: &mut Channel,
        template: usize,
        _a_bits: &[bool],
        b: &[u128],
    ) -> Result<(Vec<bool>, Vec<u128>), NodeError> {
        let tpl = self.templates.get(template);
        let hdr = ch.expect(kind::GC_HEADER)?;
        let mut r = Reader::new(&hdr);
        let got = r.u16()? as usize;
        if got != template {
            return Err(NodeError::Protocol(format!("expected template {template}, peer sent {got}")));
        }
        let _seq = r.u64()?;
        let tweak_base = r.u128()?;
        let a_labels = r.labels(tpl.num_a())?;
        let translations = r.labels(tpl.num_b())?;
        let decoding = unpack_bits(r.rest(), tpl.reveal)?;
        if b.len() != tpl.num_b() {
            return Err(NodeError::Protocol(format!("template {template}: input size mismatch")));
        }
        let tables = ch.expect(kind::GC_TABLES)?;
        let mut inputs: Vec<WireLabel> = a_labels.into_iter().map(WireLabel).collect();
        inputs.extend(b.iter().zip(&translations).map(|(x, t)| WireLabel(x ^ t)));
        let gc = GarbledCircuit {
            circuit: tpl.circuit.clone(),
            garbled_tables: tables,
            output_decoding: decoding,
            tweak_base,
        };
        let out = evaluate(&gc, &inputs)?;
        let revealed = decode(&out[..tpl.reveal], &gc.output_decoding);
        if tpl.reveal > 0 {
            ch.send(kind::EVAL_RESULT, pack_bits(&revealed))?;
        }
        Ok((revealed, out[tpl.reveal..].iter().map(|l| l.0).collect()))
    }
}

/// Per-access labels kept for shadow checks in tests: this server's registers
/// for the target id and the fresh leaf.
#[derive(Clone, Debug)]
pub struct AccessCapture {
    pub epoch: u64,
    pub read_leaf: u32,
    pub target: Vec<u128>,
    pub new_leaf: Vec<u128>,
}

pub type Capture = Arc<Mutex<Vec<AccessCapture>>>;

/// Result of stages 2 to 6 for one session.
#[derive(Clone, Debug)]
pub enum Outcome {
    Denied,
    /// Bundle registers: index (32), size (32), then the payload bits kept
    /// from each access.
    Allowed(Vec<u128>),
}

/// This server's share of the response bundle.
pub fn bundle_share(layout: &Layout, regs: &[u128]) -> Vec<u8> {
    let bits: Vec<bool> = regs.iter().map(|l| l & 1 == 1).collect();
    let mut out = Vec::with_capacity(layout.bundle_len());
    for w in 0..2 {
        let v = word_of(&bits[w * INDEX_BITS..(w + 1) * INDEX_BITS]);
        out.extend_from_slice(&v.to_be_bytes());
    }
    for byte in bits[2 * INDEX_BITS..].chunks(8) {
        out.push(byte.iter().rev().fold(0u8, |a, b| (a << 1) | *b as u8));
    }
    debug_assert_eq!(out.len(), layout.bundle_len());
    out
}

pub struct Engine {
    pub state: LabelState,
    pub templates: Arc<Templates>,
    pub party: Box<dyn Party>,
    seed: [u8; 32],
    /// Failed batches. Mixed into the randomness so a retried session never
    /// reuses the draws of an aborted one.
    failures: u64,
    pub trace: Trace,
    pub capture: Option<Capture>,
}

impl Engine {
    pub fn new(state: LabelState, templates: Arc<Templates>, party: Box<dyn Party>, seed: [u8; 32]) -> Engine {
        Engine {
            state,
            templates,
            party,
            seed,
            failures: 0,
            trace: Trace::default(),
            capture: None,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.state.layout
    }

    fn path_slots(&self, leaf: u32) -> Vec<usize> {
        let p = &self.state.layout.params;
        path_locators(p, leaf).iter().map(|l| l.global(p)).collect()
    }

    /// Run stages 2 to 6 for a batch. On error the batch's writes are
    /// discarded and the state is left at the previous epoch.
    pub fn process_batch(
        &mut self,
        ch: &mut Channel,
        sessions: &mut [SessionState],
    ) -> Result<Vec<Outcome>, NodeError> {
        let r = self.run_batch(ch, sessions);
        if r.is_err() {
            self.failures += 1;
        }
        r
    }

    fn run_batch(&mut self, ch: &mut Channel, sessions: &mut [SessionState]) -> Result<Vec<Outcome>, NodeError> {
        let lay = self.state.layout;
        let role = self.party.role();
        let garbler = role == Role::Index;
        let epoch = self.state.epoch;
        let mut ov = self.state.overlay();
        let (h, ib, accesses) = (lay.leaf_bits(), lay.id_bits(), lay.accesses());
        let d8 = 8 * lay.payload_len();
        let mut outcomes = Vec::with_capacity(sessions.len());

        for s in sessions.iter_mut() {
            // Randomness depends on the session's position in the global
            // order only, so batching does not change any draw.
            let mut rng = derive_rng(
                &self.seed,
                &[b"session", &[role.as_u8()], &ov.sessions.to_be_bytes(), &self.failures.to_be_bytes()],
            );
            ov.sessions += 1;
            // Stage 2: the range check on the recombined index.
            let n_ot = INDEX_BITS + accesses * h;
            let choices: Vec<bool> = if garbler {
                Vec::new()
            } else {
                let mut c = bits_of(s.envelope.index_share_u32() as u64, INDEX_BITS);
                c.extend((0..accesses * h).map(|_| rng.gen::<bool>()));
                c
            };
            let ot = self.party.ot_registers(ch, n_ot, &choices, &mut rng)?;
            let a_bits: Vec<bool> = if garbler {
                let mut a = bits_of(s.envelope.index_share_u32() as u64, INDEX_BITS);
                a.extend(bits_of(self.state.size as u64, INDEX_BITS));
                a
            } else {
                Vec::new()
            };
            let (rev, regs) = self.party.run(ch, Templates::VERDICT, &a_bits, &ot[..INDEX_BITS])?;
            let allow = rev[0];
            s.set_verdict(if allow { Verdict::Allow } else { Verdict::Deny })?;
            self.trace.stage(s);
            if !allow {
                outcomes.push(Outcome::Denied);
                continue;
            }
            let (targets, header) = regs.split_at(accesses * ib);
            let mut bundle = header.to_vec();

            // A session's stage is the furthest it has reached; accesses after
            // the first repeat stages 3 to 5 without moving it.
            for t in 0..accesses {
                let x = &targets[t * ib..(t + 1) * ib];
                let r_b = &ot[INDEX_BITS + t * h..INDEX_BITS + (t + 1) * h];

                // Stage 3: position lookup and remap over the access's public range.
                if t == 0 {
                    s.advance(Stage::Positions)?;
                }
                let (start, range_bits) = lay.access_range(t);
                let mut b = x.to_vec();
                b.extend_from_slice(r_b);
                b.extend(self.state.read_posmap(&ov, start, 1 << range_bits));
                let r_a: Vec<bool> = if garbler {
                    (0..h).map(|_| rng.gen()).collect()
                } else {
                    Vec::new()
                };
                let tid = self.templates.pos_fetch_id(range_bits);
                let (rev, regs) = self.party.run(ch, tid, &r_a, &b)?;
                let read_leaf = word_of(&rev);
                let (new_leaf, entries) = regs.split_at(h);
                for (j, e) in entries.chunks(h).enumerate() {
                    ov.posmap.insert(start + j as u32, e.to_vec());
                }

                // Stage 4: read and remap the block on its path.
                if t == 0 {
                    s.advance(Stage::Fetch)?;
                }
                self.trace.push(TraceEvent::PathRead { epoch, leaf: read_leaf });
                let slots = self.path_slots(read_leaf);
                let mut b = x.to_vec();
                b.extend_from_slice(new_leaf);
                b.extend(self.state.read_slots(&ov, &slots));
                let (rev, regs) = self.party.run(ch, self.templates.access_id(), &[], &b)?;
                if rev[0] {
                    return Err(NodeError::State(format!(
                        "stash overflow (capacity {})",
                        lay.params.stash_capacity
                    )));
                }
                let (payload, path) = regs.split_at(d8);
                bundle.extend_from_slice(if t < lay.depth as usize { &payload[..256] } else { payload });
                self.write_path(&mut ov, &slots, path);
                ov.accesses += 1;
                if let Some(c) = &self.capture {
                    c.lock().unwrap().push(AccessCapture {
                        epoch,
                        read_leaf,
                        target: x.to_vec(),
                        new_leaf: new_leaf.to_vec(),
                    });
                }

                // Stage 5: evictions, planned and applied inside the circuits.
                if t == 0 {
                    s.advance(Stage::Permutation)?;
                }
                for e in 0..lay.params.evictions_per_access {
                    let leaf = if e == 0 {
                        read_leaf
                    } else {
                        let l = scheduled_leaf(ov.evict_counter, h as u32);
                        ov.evict_counter += 1;
                        l
                    };
                    self.trace.push(TraceEvent::Evict { epoch, leaf });
                    let slots = self.path_slots(leaf);
                    let a_bits = if garbler { bits_of(leaf as u64, h) } else { Vec::new() };
                    let b = self.state.read_slots(&ov, &slots);
                    let (_, path) = self.party.run(ch, self.templates.evict_id(), &a_bits, &b)?;
                    self.write_path(&mut ov, &slots, &path);
                }
            }
            outcomes.push(Outcome::Allowed(bundle));
        }

        // Stage 6: both sides agree the batch is complete, then commit.
        let tag = epoch.to_be_bytes().to_vec();
        if garbler {
            ch.send(kind::BATCH_DONE, tag.clone())?;
            if ch.expect(kind::BATCH_DONE)? != tag {
                return Err(NodeError::Protocol("batch completion epoch mismatch".into()));
            }
        } else {
            if ch.expect(kind::BATCH_DONE)? != tag {
                return Err(NodeError::Protocol("batch completion epoch mismatch".into()));
            }
            ch.send(kind::BATCH_DONE, tag)?;
        }
        let (written, max_writes) = self.state.apply(ov);
        self.trace.push(TraceEvent::BatchApplied {
            epoch,
            sessions: sessions.len(),
            slots_written: written,
            max_writes_per_slot: max_writes,
        });
        for (s, o) in sessions.iter_mut().zip(&outcomes) {
            if matches!(o, Outcome::Allowed(_)) {
                s.advance(Stage::Applied)?;
            }
        }
        Ok(outcomes)
    }

    fn write_path(&self, ov: &mut crate::labels::Overlay, slots: &[usize], labels: &[u128]) {
        let sb = self.state.layout.slot_bits();
        for (g, chunk) in slots.iter().zip(labels.chunks(sb)) {
            ov.slots.insert(*g, chunk.to_vec());
        }
    }
}
