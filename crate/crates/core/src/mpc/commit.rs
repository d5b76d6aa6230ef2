use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

const DOMAIN: &[u8] = b"oct-commit-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Commitment(pub [u8; 32]);

pub fn commit(value: &[u8], nonce: &[u8; 32]) -> Commitment {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update((value.len() as u64).to_be_bytes());
    h.update(value);
    h.update(nonce);
    Commitment(h.finalize().into())
}

pub fn verify_commitment(c: &Commitment, value: &[u8], nonce: &[u8; 32]) -> bool {
    commit(value, nonce).0.ct_eq(&c.0).into()
}
