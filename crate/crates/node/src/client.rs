//! Client side: split the index, send one envelope to each server, recombine
//! the two shares and verify the proof.

use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use oct_core::merkle::{verify_proof, CertificateRecord, Digest, InclusionProof, Side};
use oct_core::mpc::{commit, Commitment};
use rand::{CryptoRng, RngCore};

use crate::dictionary::Dictionary;
use crate::layout::BUNDLE_HEADER;
use crate::wire::{kind, parse_reject, Frame, QueryEnvelope, RejectReason, ShareResponse, QUERY_ID_LEN};
use crate::NodeError;

#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub domain: String,
    pub index: u32,
    pub query_id: [u8; QUERY_ID_LEN],
    pub nonce: [u8; 32],
    pub commitment: Commitment,
    /// Envelope for the data server, then for the index server.
    pub envelopes: [QueryEnvelope; 2],
}

/// Look the domain up locally and split its index. Unknown domains fail here,
/// before anything is sent.
pub fn prepare<R: RngCore + CryptoRng>(
    dict: &Dictionary,
    domain: &str,
    rng: &mut R,
) -> Result<PreparedQuery, NodeError> {
    let index = dict
        .index_of(domain)
        .ok_or_else(|| NodeError::UnknownDomain(domain.to_string()))?;
    Ok(prepare_index(domain, index, rng))
}

/// Split an explicit index (tests use this to ask for out-of-range leaves).
pub fn prepare_index<R: RngCore + CryptoRng>(domain: &str, index: u32, rng: &mut R) -> PreparedQuery {
    let mut query_id = [0u8; QUERY_ID_LEN];
    rng.fill_bytes(&mut query_id);
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    let commitment = commit(domain.as_bytes(), &nonce);
    let s1 = rng.next_u32();
    let env = |share: u32| QueryEnvelope {
        query_id,
        commitment,
        index_share: share.to_be_bytes(),
        batch_epoch: 0,
    };
    PreparedQuery {
        domain: domain.to_string(),
        index,
        query_id,
        nonce,
        commitment,
        envelopes: [env(s1), env(s1 ^ index)],
    }
}

#[derive(Clone, Debug)]
pub struct VerifiedProof {
    pub record: CertificateRecord,
    pub proof: InclusionProof,
    pub root: Digest,
}

/// Parse a recombined bundle into a proof against the capacity root.
pub fn parse_bundle(dict: &Dictionary, bytes: &[u8]) -> Result<(u32, u32, InclusionProof, CertificateRecord), NodeError> {
    if bytes.len() != dict.bundle_len() {
        return Err(NodeError::Verification(format!(
            "bundle is {} bytes, expected {}",
            bytes.len(),
            dict.bundle_len()
        )));
    }
    let leaf_index = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let size = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
    let h = dict.depth() as usize;
    let siblings = (0..h)
        .map(|k| {
            let d: [u8; 32] = bytes[BUNDLE_HEADER + 32 * k..BUNDLE_HEADER + 32 * (k + 1)].try_into().unwrap();
            let side = if (leaf_index >> k) & 1 == 1 { Side::Left } else { Side::Right };
            (Digest(d), side)
        })
        .collect();
    let area = &bytes[BUNDLE_HEADER + 32 * h..];
    let n = u16::from_be_bytes([area[0], area[1]]) as usize;
    if 2 + n > area.len() || area[2 + n..].iter().any(|b| *b != 0) {
        return Err(NodeError::Verification("record area is malformed".into()));
    }
    let record = CertificateRecord::from_bytes(&area[2..2 + n])
        .map_err(|e| NodeError::Verification(format!("record does not parse: {e}")))?;
    let proof = InclusionProof {
        leaf_index: leaf_index as u64,
        tree_size: dict.capacity as u64,
        siblings,
    };
    Ok((leaf_index, size, proof, record))
}

/// Combine the two servers' shares and verify. Never returns success for a
/// proof that does not check out.
pub fn recombine(
    dict: &Dictionary,
    q: &PreparedQuery,
    a: &ShareResponse,
    b: &ShareResponse,
) -> Result<VerifiedProof, NodeError> {
    if a.query_id != q.query_id || b.query_id != q.query_id {
        return Err(NodeError::Verification("response query id does not match".into()));
    }
    if a.share_index == b.share_index {
        return Err(NodeError::Verification("both responses carry the same share index".into()));
    }
    if a.proof_share.len() != b.proof_share.len() {
        return Err(NodeError::Verification("share lengths differ".into()));
    }
    let bytes: Vec<u8> = a.proof_share.iter().zip(&b.proof_share).map(|(x, y)| x ^ y).collect();
    let (leaf_index, size, proof, record) = parse_bundle(dict, &bytes)?;
    if leaf_index != q.index {
        return Err(NodeError::Verification(format!(
            "proof is for leaf {leaf_index}, asked for {}",
            q.index
        )));
    }
    if size != dict.size {
        return Err(NodeError::Verification(format!("log size {size} does not match dictionary")));
    }
    if record.domain != q.domain {
        return Err(NodeError::Verification(format!("record is for {}", record.domain)));
    }
    if !verify_proof(&record.leaf_digest(), &proof, &dict.root) {
        return Err(NodeError::Verification("inclusion proof does not verify against the root".into()));
    }
    Ok(VerifiedProof {
        record,
        proof,
        root: dict.root,
    })
}

/// Turn a server's reply frame into a share, or the rejection it carries.
pub fn read_response(f: &Frame) -> Result<ShareResponse, NodeError> {
    match f.kind {
        kind::SHARE_RESPONSE => ShareResponse::from_bytes(&f.payload),
        kind::REJECT => {
            let (_, reason) = parse_reject(&f.payload)?;
            Err(NodeError::Rejected(reason))
        }
        k => Err(NodeError::Protocol(format!("unexpected reply type {k:#04x}"))),
    }
}

#[derive(Clone, Debug)]
pub struct LookupReport {
    pub proof: VerifiedProof,
    pub latency: Duration,
}

/// Send both envelopes and wait for both shares. `servers` may be given in
/// either order; the XOR split is symmetric.
pub fn lookup_prepared(
    servers: &[SocketAddr; 2],
    dict: &Dictionary,
    q: &PreparedQuery,
    timeout: Duration,
) -> Result<LookupReport, NodeError> {
    let start = Instant::now();
    let mut conns = Vec::with_capacity(2);
    for (addr, env) in servers.iter().zip(&q.envelopes) {
        let mut s = TcpStream::connect_timeout(addr, timeout)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(timeout))?;
        Frame::new(kind::QUERY, env.to_bytes()).write_to(&mut s)?;
        conns.push(s);
    }
    let mut replies = Vec::with_capacity(2);
    for s in conns.iter_mut() {
        replies.push(read_response(&Frame::read_from(s)?));
    }
    let b = replies.pop().unwrap()?;
    let a = replies.pop().unwrap()?;
    let proof = recombine(dict, q, &a, &b)?;
    Ok(LookupReport {
        proof,
        latency: start.elapsed(),
    })
}

/// Look up a domain, retrying with a fresh split when a server asks us to
/// come back later or loses its peer mid-session. Each retry uses a new
/// commitment, so it is never mistaken for a replay.
pub fn lookup<R: RngCore + CryptoRng>(
    servers: &[SocketAddr; 2],
    dict: &Dictionary,
    domain: &str,
    timeout: Duration,
    rng: &mut R,
) -> Result<LookupReport, NodeError> {
    const ATTEMPTS: u32 = 8;
    let mut backoff = Duration::from_millis(50);
    for attempt in 1.. {
        let q = prepare(dict, domain, rng)?;
        match lookup_prepared(servers, dict, &q, timeout) {
            Err(NodeError::Rejected(RejectReason::RetryLater | RejectReason::Failed)) if attempt < ATTEMPTS => {
                log::debug!("attempt {attempt} for {domain} rejected, retrying in {backoff:?}");
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(2));
            }
            r => return r,
        }
    }
    unreachable!()
}
