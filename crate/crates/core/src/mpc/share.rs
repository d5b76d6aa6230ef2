use rand::RngCore;

use super::MpcError;

/// One XOR share of a byte string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Share(pub Vec<u8>);

impl Share {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn share_split<R: RngCore + ?Sized>(secret: &[u8], rng: &mut R) -> (Share, Share) {
    let mut a = vec![0u8; secret.len()];
    rng.fill_bytes(&mut a);
    let b = a.iter().zip(secret).map(|(x, s)| x ^ s).collect();
    (Share(a), Share(b))
}

pub fn share_combine(a: &Share, b: &Share) -> Result<Vec<u8>, MpcError> {
    if a.len() != b.len() {
        return Err(MpcError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x ^ y).collect())
}
