//! Free-XOR, point-and-permute garbling.
//!
//! AND gates carry four rows indexed by the colour bits of the input labels.
//! Each row is `label ^ pad` (16 bytes) followed by an 8-byte tag binding the
//! pad and both halves of the label, so a wrong input label or any flipped
//! row bit aborts evaluation instead of yielding a wrong output. Pads come
//! from fixed-key AES used as a tweakable correlation-robust hash:
//! `H(K) = AES(K) ^ K` with `K = sigma(A) ^ sigma^2(B) ^ tweak`.

use std::sync::Arc;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{Rng, RngCore};
use subtle::ConstantTimeEq;

use super::circuit::{BoolCircuit, GateOp};
use super::MpcError;

pub const AND_ROW_BYTES: usize = 24;
pub const AND_TABLE_BYTES: usize = 4 * AND_ROW_BYTES;

const FIXED_KEY: [u8; 16] = *b"oct fixed key v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct WireLabel(pub u128);

impl WireLabel {
    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        WireLabel(u128::from_le_bytes(b))
    }

    /// Point-and-permute colour bit.
    pub fn color(self) -> bool {
        self.0 & 1 == 1
    }
}

/// Global free-XOR offset; its low bit is always set.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Delta(u128);

impl Delta {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Delta {
        Delta::from_u128(rng.gen())
    }

    pub fn from_u128(v: u128) -> Delta {
        Delta(v | 1)
    }

    pub fn value(self) -> u128 {
        self.0
    }
}

impl std::fmt::Debug for Delta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Delta(..)")
    }
}

#[inline(always)]
fn sigma(x: u128) -> u128 {
    let hi = x >> 64;
    let lo = x & 0xffff_ffff_ffff_ffff;
    ((hi ^ lo) << 64) | hi
}

#[inline(always)]
fn tag(pad: u128, label: u128) -> u64 {
    (pad as u64) ^ (label as u64) ^ ((label >> 64) as u64)
}

struct Hasher {
    aes: Aes128,
}

impl Hasher {
    fn new() -> Self {
        Hasher {
            aes: Aes128::new(GenericArray::from_slice(&FIXED_KEY)),
        }
    }

    /// In place: `x -> AES(x) ^ x`.
    #[inline(always)]
    fn hash_blocks<const N: usize>(&self, xs: &mut [u128; N]) {
        let mut blocks = [GenericArray::default(); N];
        for (b, x) in blocks.iter_mut().zip(xs.iter()) {
            b.copy_from_slice(&x.to_le_bytes());
        }
        self.aes.encrypt_blocks(&mut blocks);
        for (b, x) in blocks.iter().zip(xs.iter_mut()) {
            *x ^= u128::from_le_bytes((*b).into());
        }
    }
}

thread_local! {
    static HASHER: Hasher = Hasher::new();
}

#[derive(Clone, Debug)]
pub struct GarbledCircuit {
    pub circuit: Arc<BoolCircuit>,
    /// `AND_TABLE_BYTES` per AND gate, in gate order.
    pub garbled_tables: Vec<u8>,
    /// Low bit of each output wire's zero label.
    pub output_decoding: Vec<bool>,
    /// Per-circuit tweak offset; AND gate `k` uses `tweak_base + k`.
    pub tweak_base: u128,
}

/// Garbler-side result: the circuit plus the secrets needed to drive it.
#[derive(Clone, Debug)]
pub struct GarbledOutput {
    pub gc: GarbledCircuit,
    pub input_zero: Vec<WireLabel>,
    pub output_zero: Vec<WireLabel>,
}

impl GarbledOutput {
    pub fn input_pair(&self, i: usize, delta: Delta) -> (WireLabel, WireLabel) {
        let z = self.input_zero[i];
        (z, WireLabel(z.0 ^ delta.0))
    }
}

/// Garble under a caller-supplied global delta and tweak base. Tweaks must not
/// repeat across circuits garbled under the same delta.
pub fn garble_with<R: RngCore + ?Sized>(
    circuit: Arc<BoolCircuit>,
    delta: Delta,
    tweak_base: u128,
    rng: &mut R,
) -> GarbledOutput {
    let d = delta.0;
    let s_d = sigma(d);
    let ss_d = sigma(s_d);
    let n_in = circuit.num_inputs();
    let mut w = vec![0u128; circuit.num_wires()];
    for x in w.iter_mut().take(n_in) {
        *x = rng.gen();
    }
    let mut tables = vec![0u8; circuit.num_and() * AND_TABLE_BYTES];
    let mut and_idx: usize = 0;
    HASHER.with(|h| {
        for g in &circuit.gates {
            let (a, b, o) = (g.a as usize, g.b as usize, g.out as usize);
            match g.op {
                GateOp::Xor => w[o] = w[a] ^ w[b],
                GateOp::Not => w[o] = w[a] ^ d,
                GateOp::And => {
                    let (a0, b0) = (w[a], w[b]);
                    let (pa, pb) = (a0 & 1, b0 & 1);
                    let t = (tweak_base + and_idx as u128) << 1;
                    let base = sigma(a0) ^ sigma(sigma(b0)) ^ t;
                    let mut ks = [0u128; 8];
                    for r in 0..4u128 {
                        let va = (r >> 1) ^ pa;
                        let vb = (r & 1) ^ pb;
                        let k = base ^ (va.wrapping_neg() & s_d) ^ (vb.wrapping_neg() & ss_d);
                        ks[2 * r as usize] = k;
                        ks[2 * r as usize + 1] = k ^ 1;
                    }
                    h.hash_blocks(&mut ks);
                    let c0: u128 = rng.gen();
                    let row_block = &mut tables[and_idx * AND_TABLE_BYTES..(and_idx + 1) * AND_TABLE_BYTES];
                    for (r, row) in row_block.chunks_exact_mut(AND_ROW_BYTES).enumerate() {
                        let r = r as u128;
                        let va = (r >> 1) ^ pa;
                        let vb = (r & 1) ^ pb;
                        let out = c0 ^ ((va & vb).wrapping_neg() & d);
                        row[..16].copy_from_slice(&(out ^ ks[2 * r as usize]).to_le_bytes());
                        row[16..].copy_from_slice(&tag(ks[2 * r as usize + 1], out).to_le_bytes());
                    }
                    and_idx += 1;
                    w[o] = c0;
                }
            }
        }
    });
    let output_zero: Vec<WireLabel> = w[circuit.output_wires()].iter().map(|x| WireLabel(*x)).collect();
    let input_zero = w[..n_in].iter().map(|x| WireLabel(*x)).collect();
    GarbledOutput {
        gc: GarbledCircuit {
            output_decoding: output_zero.iter().map(|l| l.color()).collect(),
            circuit,
            garbled_tables: tables,
            tweak_base,
        },
        input_zero,
        output_zero,
    }
}

/// Garble with a fresh delta. Returns input label pairs `(zero, one)` in wire order.
pub fn garble<R: RngCore + ?Sized>(
    circuit: &BoolCircuit,
    rng: &mut R,
) -> (GarbledCircuit, Vec<(WireLabel, WireLabel)>, Vec<bool>) {
    let delta = Delta::random(rng);
    let out = garble_with(Arc::new(circuit.clone()), delta, 0, rng);
    let pairs = (0..out.input_zero.len()).map(|i| out.input_pair(i, delta)).collect();
    let dec = out.gc.output_decoding.clone();
    (out.gc, pairs, dec)
}

pub fn evaluate(gc: &GarbledCircuit, inputs: &[WireLabel]) -> Result<Vec<WireLabel>, MpcError> {
    let c = &gc.circuit;
    if inputs.len() != c.num_inputs() {
        return Err(MpcError::InputCount {
            expected: c.num_inputs(),
            got: inputs.len(),
        });
    }
    let want = c.num_and() * AND_TABLE_BYTES;
    if gc.garbled_tables.len() != want {
        return Err(MpcError::TableSize {
            expected: want,
            got: gc.garbled_tables.len(),
        });
    }
    let mut w = vec![0u128; c.num_wires()];
    for (x, l) in w.iter_mut().zip(inputs) {
        *x = l.0;
    }
    let tables = &gc.garbled_tables;
    let mut and_idx = 0usize;
    HASHER.with(|h| -> Result<(), MpcError> {
        for g in &c.gates {
            let (a, b, o) = (g.a as usize, g.b as usize, g.out as usize);
            match g.op {
                GateOp::Xor => w[o] = w[a] ^ w[b],
                GateOp::Not => w[o] = w[a],
                GateOp::And => {
                    let (la, lb) = (w[a], w[b]);
                    let r = (((la & 1) << 1) | (lb & 1)) as usize;
                    let t = (gc.tweak_base + and_idx as u128) << 1;
                    let k = sigma(la) ^ sigma(sigma(lb)) ^ t;
                    let mut ks = [k, k ^ 1];
                    h.hash_blocks(&mut ks);
                    let off = and_idx * AND_TABLE_BYTES + r * AND_ROW_BYTES;
                    let row = &tables[off..off + AND_ROW_BYTES];
                    let ct = u128::from_le_bytes(row[..16].try_into().unwrap());
                    let out = ct ^ ks[0];
                    let expect = tag(ks[1], out).to_le_bytes();
                    if !bool::from(row[16..24].ct_eq(&expect)) {
                        return Err(MpcError::InvalidLabel { gate: and_idx });
                    }
                    w[o] = out;
                    and_idx += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(w[c.output_wires()].iter().map(|x| WireLabel(*x)).collect())
}

pub fn decode(outputs: &[WireLabel], decoding: &[bool]) -> Vec<bool> {
    outputs
        .iter()
        .zip(decoding)
        .map(|(l, d)| l.color() ^ d)
        .collect()
}
