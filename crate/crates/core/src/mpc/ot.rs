//! Base 1-out-of-2 OT over Ristretto (Chou-Orlandi "simplest OT", semi-honest).
//!
//! Sender publishes `A = aG`. For choice `c` the receiver sends
//! `B = bG + c*A`. Sender keys are `H(aB)` and `H(a(B - A))`; the receiver
//! computes `H(bA)`, which matches exactly one of them.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoBasepointTable, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::MpcError;

/// A scalar together with `scalar * G`; the precomputable part of an OT.
#[derive(Clone, Debug)]
pub struct ExpPair {
    pub scalar: Scalar,
    pub element: RistrettoPoint,
}

impl ExpPair {
    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> ExpPair {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        let scalar = Scalar::from_bytes_mod_order_wide(&wide);
        ExpPair {
            scalar,
            element: RISTRETTO_BASEPOINT_TABLE * &scalar,
        }
    }

    pub fn verify(&self) -> bool {
        RISTRETTO_BASEPOINT_TABLE * &self.scalar == self.element
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OtMessage {
    SenderSetup { point: [u8; 32] },
    ReceiverChoice { points: Vec<[u8; 32]> },
    SenderTransfer { ciphertexts: Vec<(Vec<u8>, Vec<u8>)> },
}

impl OtMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            OtMessage::SenderSetup { point } => {
                out.push(0);
                out.extend_from_slice(point);
            }
            OtMessage::ReceiverChoice { points } => {
                out.push(1);
                out.extend_from_slice(&(points.len() as u32).to_be_bytes());
                for p in points {
                    out.extend_from_slice(p);
                }
            }
            OtMessage::SenderTransfer { ciphertexts } => {
                out.push(2);
                out.extend_from_slice(&(ciphertexts.len() as u32).to_be_bytes());
                let len = ciphertexts.first().map_or(0, |(a, _)| a.len());
                out.extend_from_slice(&(len as u32).to_be_bytes());
                for (a, b) in ciphertexts {
                    out.extend_from_slice(a);
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<OtMessage, MpcError> {
        let err = |m: &str| MpcError::Ot(m.to_string());
        let (&tag, rest) = buf.split_first().ok_or_else(|| err("empty message"))?;
        let u32_at = |b: &[u8], i: usize| -> Result<usize, MpcError> {
            b.get(i..i + 4)
                .map(|s| u32::from_be_bytes(s.try_into().unwrap()) as usize)
                .ok_or_else(|| err("truncated"))
        };
        match tag {
            0 => Ok(OtMessage::SenderSetup {
                point: rest.try_into().map_err(|_| err("setup length"))?,
            }),
            1 => {
                let n = u32_at(rest, 0)?;
                let body = &rest[4..];
                if body.len() != n * 32 {
                    return Err(err("choice length"));
                }
                Ok(OtMessage::ReceiverChoice {
                    points: body.chunks(32).map(|c| c.try_into().unwrap()).collect(),
                })
            }
            2 => {
                let n = u32_at(rest, 0)?;
                let len = u32_at(rest, 4)?;
                let body = &rest[8..];
                if body.len() != n * 2 * len {
                    return Err(err("transfer length"));
                }
                Ok(OtMessage::SenderTransfer {
                    ciphertexts: body
                        .chunks(2 * len.max(1))
                        .take(n)
                        .map(|c| (c[..len].to_vec(), c[len..].to_vec()))
                        .collect(),
                })
            }
            _ => Err(err("unknown round")),
        }
    }
}

fn decompress(bytes: &[u8; 32]) -> Result<RistrettoPoint, MpcError> {
    CompressedRistretto(*bytes)
        .decompress()
        .ok_or(MpcError::BadGroupElement)
}

fn kdf(index: usize, a: &[u8; 32], b: &[u8; 32], shared: &RistrettoPoint, len: usize) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"oct-ot-v1");
    h.update((index as u64).to_be_bytes());
    h.update(a);
    h.update(b);
    h.update(shared.compress().as_bytes());
    let seed = h.finalize();
    let mut out = Vec::with_capacity(len);
    let mut ctr = 0u32;
    while out.len() < len {
        let block = Sha256::new()
            .chain_update(seed)
            .chain_update(ctr.to_be_bytes())
            .finalize();
        out.extend_from_slice(&block[..(len - out.len()).min(32)]);
        ctr += 1;
    }
    out
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// First-round state of the sender: the published point and its secret.
pub struct OtSenderSetup {
    a: Scalar,
    a_bytes: [u8; 32],
    a_times_a: RistrettoPoint,
}

pub struct OtSender;

impl OtSender {
    pub fn setup(pair: ExpPair) -> (OtSenderSetup, OtMessage) {
        let a_bytes = pair.element.compress().to_bytes();
        let a_times_a = pair.element * pair.scalar;
        (
            OtSenderSetup {
                a: pair.scalar,
                a_bytes,
                a_times_a,
            },
            OtMessage::SenderSetup { point: a_bytes },
        )
    }
}

impl OtSenderSetup {
    /// Encrypt `messages[i] = (m0, m1)` under the receiver's choice points.
    pub fn transfer(
        &self,
        choice: &OtMessage,
        messages: &[(Vec<u8>, Vec<u8>)],
    ) -> Result<OtMessage, MpcError> {
        let OtMessage::ReceiverChoice { points } = choice else {
            return Err(MpcError::Ot("expected receiver choice".into()));
        };
        if points.len() != messages.len() {
            return Err(MpcError::Ot(format!(
                "{} choices for {} message pairs",
                points.len(),
                messages.len()
            )));
        }
        let mut ciphertexts = Vec::with_capacity(messages.len());
        for (i, (pb, (m0, m1))) in points.iter().zip(messages).enumerate() {
            if m0.len() != m1.len() {
                return Err(MpcError::Ot("message pair lengths differ".into()));
            }
            let b = decompress(pb)?;
            let ab = b * self.a;
            let k0 = kdf(i, &self.a_bytes, pb, &ab, m0.len());
            let k1 = kdf(i, &self.a_bytes, pb, &(ab - self.a_times_a), m1.len());
            ciphertexts.push((xor(m0, &k0), xor(m1, &k1)));
        }
        Ok(OtMessage::SenderTransfer { ciphertexts })
    }
}

pub struct OtReceiver {
    a_bytes: [u8; 32],
    b_points: Vec<[u8; 32]>,
    keys: Vec<RistrettoPoint>,
    choices: Vec<bool>,
}

impl OtReceiver {
    /// `pairs` supplies one precomputed `(b, bG)` per choice.
    pub fn choose(
        setup: &OtMessage,
        choices: &[bool],
        pairs: Vec<ExpPair>,
    ) -> Result<(OtReceiver, OtMessage), MpcError> {
        let OtMessage::SenderSetup { point } = setup else {
            return Err(MpcError::Ot("expected sender setup".into()));
        };
        if pairs.len() != choices.len() {
            return Err(MpcError::Ot("one exponentiation pair per choice required".into()));
        }
        let a = decompress(point)?;
        let table = (choices.len() > 8).then(|| RistrettoBasepointTable::create(&a));
        let mut b_points = Vec::with_capacity(choices.len());
        let mut keys = Vec::with_capacity(choices.len());
        for (c, p) in choices.iter().zip(pairs) {
            let b = if *c { p.element + a } else { p.element };
            b_points.push(b.compress().to_bytes());
            keys.push(match &table {
                Some(t) => t * &p.scalar,
                None => a * p.scalar,
            });
        }
        Ok((
            OtReceiver {
                a_bytes: *point,
                b_points: b_points.clone(),
                keys,
                choices: choices.to_vec(),
            },
            OtMessage::ReceiverChoice { points: b_points },
        ))
    }

    pub fn receive(&self, transfer: &OtMessage) -> Result<Vec<Vec<u8>>, MpcError> {
        let OtMessage::SenderTransfer { ciphertexts } = transfer else {
            return Err(MpcError::Ot("expected sender transfer".into()));
        };
        if ciphertexts.len() != self.choices.len() {
            return Err(MpcError::Ot("transfer count mismatch".into()));
        }
        Ok(ciphertexts
            .iter()
            .enumerate()
            .map(|(i, (e0, e1))| {
                let e = if self.choices[i] { e1 } else { e0 };
                let k = kdf(i, &self.a_bytes, &self.b_points[i], &self.keys[i], e.len());
                xor(e, &k)
            })
            .collect())
    }
}

/// Run one OT in memory; returns the receiver's output and the sender-side
/// view (the receiver's choice message).
pub fn ot_transfer<R: RngCore + CryptoRng + ?Sized>(
    m0: &[u8],
    m1: &[u8],
    choice: bool,
    rng: &mut R,
) -> Result<(Vec<u8>, OtMessage), MpcError> {
    if m0.len() != m1.len() {
        return Err(MpcError::Ot("message lengths differ".into()));
    }
    let (sender, setup) = OtSender::setup(ExpPair::random(rng));
    let (receiver, choice_msg) = OtReceiver::choose(&setup, &[choice], vec![ExpPair::random(rng)])?;
    let transfer = sender.transfer(&choice_msg, &[(m0.to_vec(), m1.to_vec())])?;
    let mut out = receiver.receive(&transfer)?;
    Ok((out.pop().unwrap(), choice_msg))
}
