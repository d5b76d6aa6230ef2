//! Framed messages: `OCT1` magic, one type byte, big-endian u32 payload
//! length, payload.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use oct_core::mpc::Commitment;
use sha2::{Digest, Sha256};

use crate::NodeError;

pub const MAGIC: [u8; 4] = *b"OCT1";
pub const HEADER_LEN: usize = 9;
/// Largest accepted payload; a garbled eviction circuit at N = 2^14 stays well below.
pub const MAX_PAYLOAD: usize = 1 << 30;

pub mod kind {
    pub const QUERY: u8 = 0x01;
    pub const SHARE_RESPONSE: u8 = 0x02;
    pub const REJECT: u8 = 0x03;
    pub const HANDSHAKE: u8 = 0x10;
    pub const GC_HEADER: u8 = 0x11;
    pub const GC_TABLES: u8 = 0x12;
    pub const EVAL_RESULT: u8 = 0x13;
    pub const OT_SETUP: u8 = 0x14;
    pub const OT_CHOICE: u8 = 0x15;
    pub const OT_TRANSFER: u8 = 0x16;
    pub const BATCH_ACK: u8 = 0x17;
    pub const BATCH_DONE: u8 = 0x18;
    pub const ABORT: u8 = 0x1f;
    pub const BATCH_SYNC: u8 = 0x20;

    pub fn is_known(k: u8) -> bool {
        matches!(k, 0x01..=0x03 | 0x10..=0x18 | 0x1f | 0x20)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: u8, payload: Vec<u8>) -> Frame {
        Frame { kind, payload }
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(&MAGIC);
        h[4] = self.kind;
        h[5..].copy_from_slice(&(self.payload.len() as u32).to_be_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u8, usize), NodeError> {
        if h[..4] != MAGIC {
            return Err(NodeError::Frame("bad magic".into()));
        }
        if !kind::is_known(h[4]) {
            return Err(NodeError::Frame(format!("unknown message type {:#04x}", h[4])));
        }
        let len = u32::from_be_bytes(h[5..].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(NodeError::Frame(format!("payload length {len} too large")));
        }
        Ok((h[4], len))
    }

    /// Parse exactly one frame from a byte slice.
    pub fn from_bytes(b: &[u8]) -> Result<Frame, NodeError> {
        if b.len() < HEADER_LEN {
            return Err(NodeError::Frame("truncated header".into()));
        }
        let (kind, len) = Frame::parse_header(b[..HEADER_LEN].try_into().unwrap())?;
        if b.len() != HEADER_LEN + len {
            return Err(NodeError::Frame("length field disagrees with frame size".into()));
        }
        Ok(Frame::new(kind, b[HEADER_LEN..].to_vec()))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, NodeError> {
        let mut h = [0u8; HEADER_LEN];
        if let Err(e) = r.read_exact(&mut h) {
            return Err(match e.kind() {
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset => {
                    NodeError::PeerClosed
                }
                std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => NodeError::Timeout,
                _ => NodeError::Io(e),
            });
        }
        let (kind, len) = Frame::parse_header(&h)?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NodeError::PeerClosed,
            _ => NodeError::Io(e),
        })?;
        Ok(Frame { kind, payload })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NodeError> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)?;
        w.flush()?;
        Ok(())
    }
}

/// Cursor over a payload with typed, bounds-checked reads.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], NodeError> {
        if self.buf.len() - self.pos < n {
            return Err(NodeError::Frame("payload truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], NodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8, NodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, NodeError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, NodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, NodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn u128(&mut self) -> Result<u128, NodeError> {
        Ok(u128::from_be_bytes(self.array()?))
    }

    pub fn labels(&mut self, n: usize) -> Result<Vec<u128>, NodeError> {
        let raw = self.take(n.checked_mul(16).ok_or_else(|| NodeError::Frame("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(16)
            .map(|c| u128::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn finish(&self) -> Result<(), NodeError> {
        if self.pos != self.buf.len() {
            return Err(NodeError::Frame("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn put_labels(out: &mut Vec<u8>, labels: &[u128]) {
    out.reserve(labels.len() * 16);
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>, NodeError> {
    if bytes.len() != n.div_ceil(8) {
        return Err(NodeError::Frame("bit vector length".into()));
    }
    Ok((0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1 == 1).collect())
}

pub const QUERY_ID_LEN: usize = 16;
pub const ENVELOPE_LEN: usize = QUERY_ID_LEN + 32 + 4 + 8;

/// One server's half of a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryEnvelope {
    pub query_id: [u8; QUERY_ID_LEN],
    pub commitment: Commitment,
    /// XOR share of the leaf index.
    pub index_share: [u8; 4],
    pub batch_epoch: u64,
}

impl QueryEnvelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_LEN);
        out.extend_from_slice(&self.query_id);
        out.extend_from_slice(&self.commitment.0);
        out.extend_from_slice(&self.index_share);
        out.extend_from_slice(&self.batch_epoch.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        if b.len() != ENVELOPE_LEN {
            return Err(NodeError::Frame(format!(
                "envelope is {} bytes, expected {ENVELOPE_LEN}",
                b.len()
            )));
        }
        let mut r = Reader::new(b);
        Ok(QueryEnvelope {
            query_id: r.array()?,
            commitment: Commitment(r.array()?),
            index_share: r.array()?,
            batch_epoch: r.u64()?,
        })
    }

    pub fn index_share_u32(&self) -> u32 {
        u32::from_be_bytes(self.index_share)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareResponse {
    pub query_id: [u8; QUERY_ID_LEN],
    /// 1 for the data server, 2 for the index server.
    pub share_index: u8,
    pub proof_share: Vec<u8>,
}

impl ShareResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUERY_ID_LEN + 1 + self.proof_share.len());
        out.extend_from_slice(&self.query_id);
        out.push(self.share_index);
        out.extend_from_slice(&self.proof_share);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        let mut r = Reader::new(b);
        let query_id = r.array()?;
        let share_index = r.u8()?;
        if share_index != 1 && share_index != 2 {
            return Err(NodeError::Frame(format!("share index {share_index}")));
        }
        Ok(ShareResponse {
            query_id,
            share_index,
            proof_share: r.rest().to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    Denied = 1,
    Duplicate = 2,
    RetryLater = 3,
    Failed = 4,
    Malformed = 5,
}

impl RejectReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => RejectReason::Denied,
            2 => RejectReason::Duplicate,
            3 => RejectReason::RetryLater,
            4 => RejectReason::Failed,
            5 => RejectReason::Malformed,
            _ => return None,
        })
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::Denied => "denied",
            RejectReason::Duplicate => "duplicate commitment",
            RejectReason::RetryLater => "server busy, retry later",
            RejectReason::Failed => "session failed",
            RejectReason::Malformed => "malformed request",
        };
        f.write_str(s)
    }
}

/// Reject payload: query id, reason, zero padding up to `padded_len` so that
/// rejections and share responses have the same size.
pub fn reject_payload(query_id: &[u8; QUERY_ID_LEN], reason: RejectReason, padded_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(padded_len.max(QUERY_ID_LEN + 1));
    out.extend_from_slice(query_id);
    out.push(reason as u8);
    out.resize(padded_len.max(QUERY_ID_LEN + 1), 0);
    out
}

pub fn parse_reject(b: &[u8]) -> Result<([u8; QUERY_ID_LEN], RejectReason), NodeError> {
    let mut r = Reader::new(b);
    let id = r.array()?;
    let reason = RejectReason::from_u8(r.u8()?).ok_or_else(|| NodeError::Frame("reject reason".into()))?;
    Ok((id, reason))
}

/// Running digest of everything sent over a channel.
#[derive(Clone, Debug, Default)]
pub struct Transcript {
    hasher: Sha256,
    pub frames: u64,
    pub bytes: u64,
    /// Kept frames, when enabled (tests only; can be large).
    pub kept: Option<Vec<Frame>>,
}

impl Transcript {
    pub fn keeping() -> Self {
        Transcript {
            kept: Some(Vec::new()),
            ..Default::default()
        }
    }

    pub fn record(&mut self, f: &Frame) {
        self.hasher.update(f.header());
        self.hasher.update(&f.payload);
        self.frames += 1;
        self.bytes += f.encoded_len() as u64;
        if let Some(k) = &mut self.kept {
            k.push(f.clone());
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

pub type SharedTranscript = Arc<Mutex<Transcript>>;

pub trait FrameSink: Send {
    fn send_frame(&mut self, f: Frame) -> Result<(), NodeError>;
}

pub trait FrameSource: Send {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, NodeError>;
}

struct TcpSink(BufWriter<TcpStream>);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, f: Frame) -> Result<(), NodeError> {
        f.write_to(&mut self.0)
    }
}

struct TcpSource(BufReader<TcpStream>);

impl FrameSource for TcpSource {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, NodeError> {
        self.0.get_ref().set_read_timeout(timeout)?;
        let mut h = [0u8; HEADER_LEN];
        fill_patient(&mut self.0, &mut h, true)?;
        let (kind, len) = Frame::parse_header(&h)?;
        let mut payload = vec![0u8; len];
        fill_patient(&mut self.0, &mut payload, false)?;
        Ok(Frame { kind, payload })
    }
}

/// Fill `buf`. A timeout before the first byte of a frame is reported; once a
/// frame has started it is read to the end so the stream never desynchronises.
fn fill_patient<R: Read>(r: &mut R, buf: &mut [u8], at_boundary: bool) -> Result<(), NodeError> {
    use std::io::ErrorKind;
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(NodeError::PeerClosed),
            Ok(n) => filled += n,
            Err(e) => match e.kind() {
                ErrorKind::Interrupted => {}
                ErrorKind::WouldBlock | ErrorKind::TimedOut => {
                    if at_boundary && filled == 0 {
                        return Err(NodeError::Timeout);
                    }
                }
                ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe => {
                    return Err(NodeError::PeerClosed)
                }
                _ => return Err(NodeError::Io(e)),
            },
        }
    }
    Ok(())
}

struct MemSink(Sender<Frame>);

impl FrameSink for MemSink {
    fn send_frame(&mut self, f: Frame) -> Result<(), NodeError> {
        self.0.send(f).map_err(|_| NodeError::PeerClosed)
    }
}

struct MemSource(Receiver<Frame>);

impl FrameSource for MemSource {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Frame, NodeError> {
        match timeout {
            None => self.0.recv().map_err(|_| NodeError::PeerClosed),
            Some(t) => self.0.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => NodeError::Timeout,
                RecvTimeoutError::Disconnected => NodeError::PeerClosed,
            }),
        }
    }
}

/// Sending half of a connection; may be shared between threads.
pub struct Outbox {
    sink: Box<dyn FrameSink>,
    transcript: Option<SharedTranscript>,
}

impl Outbox {
    pub fn send(&mut self, kind: u8, payload: Vec<u8>) -> Result<(), NodeError> {
        let f = Frame::new(kind, payload);
        if let Some(t) = &self.transcript {
            t.lock().unwrap().record(&f);
        }
        self.sink.send_frame(f)
    }
}

pub struct Inbox {
    source: Box<dyn FrameSource>,
}

impl Inbox {
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Frame, NodeError> {
        self.source.recv_frame(timeout)
    }
}

/// A bidirectional framed connection.
pub struct Channel {
    pub outbox: Outbox,
    pub inbox: Inbox,
    pub timeout: Option<Duration>,
}

impl Channel {
    pub fn tcp(stream: TcpStream) -> Result<Channel, NodeError> {
        stream.set_nodelay(true)?;
        let r = stream.try_clone()?;
        Ok(Channel {
            outbox: Outbox {
                sink: Box::new(TcpSink(BufWriter::with_capacity(1 << 16, stream))),
                transcript: None,
            },
            inbox: Inbox {
                source: Box::new(TcpSource(BufReader::with_capacity(1 << 16, r))),
            },
            timeout: None,
        })
    }

    /// Two connected in-memory endpoints.
    pub fn mem_pair() -> (Channel, Channel) {
        let (atx, brx) = channel();
        let (btx, arx) = channel();
        let mk = |tx, rx| Channel {
            outbox: Outbox {
                sink: Box::new(MemSink(tx)),
                transcript: None,
            },
            inbox: Inbox {
                source: Box::new(MemSource(rx)),
            },
            timeout: None,
        };
        (mk(atx, arx), mk(btx, brx))
    }

    pub fn record_into(&mut self, t: SharedTranscript) {
        self.outbox.transcript = Some(t);
    }

    pub fn split(self) -> (Outbox, Inbox) {
        (self.outbox, self.inbox)
    }

    pub fn send(&mut self, kind: u8, payload: Vec<u8>) -> Result<(), NodeError> {
        self.outbox.send(kind, payload)
    }

    pub fn recv(&mut self) -> Result<Frame, NodeError> {
        let f = self.inbox.recv(self.timeout)?;
        if f.kind == kind::ABORT {
            return Err(NodeError::Protocol(format!(
                "peer aborted: {}",
                String::from_utf8_lossy(&f.payload)
            )));
        }
        Ok(f)
    }

    /// Receive a frame of the given type; anything else is a protocol violation.
    pub fn expect(&mut self, want: u8) -> Result<Vec<u8>, NodeError> {
        let f = self.recv()?;
        if f.kind != want {
            return Err(NodeError::Protocol(format!(
                "expected message {want:#04x}, got {:#04x}",
                f.kind
            )));
        }
        Ok(f.payload)
    }
}
