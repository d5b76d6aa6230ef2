//! The networked servers.
//!
//! The index server listens for clients and for its peer; the data server
//! listens for clients and dials the index server, reconnecting with backoff
//! whenever the link drops. The index server leads: it forms each batch from
//! its queue and announces the batch's commitments, the data server replies
//! with which of them it holds, and both then run the batch in lock step.
//!
//! With the pipeline on, each server runs three groups of threads joined by
//! bounded queues: per-connection readers (stage 1), one executor (stages 2
//! to 6) and one responder (stages 7 and 8). With it off, the executor does
//! all of it and only the socket reads stay on the connection threads.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use oct_core::merkle::Digest;
use oct_core::mpc::{Commitment, Delta};

use crate::config::{BatchConfig, NodeConfig};
use crate::engine::{bundle_share, Engine, Evaluator, Garbler, Outcome, Party};
use crate::labels::{state_file, LabelState, Role};
use crate::layout::Layout;
use crate::pools::PoolSet;
use crate::session::{SessionState, Stage, Trace};
use crate::templates::Templates;
use crate::wire::{
    kind, parse_reject, reject_payload, Channel, Frame, QueryEnvelope, Reader, RejectReason, ShareResponse,
    SharedTranscript, QUERY_ID_LEN,
};
use crate::NodeError;

/// Capacity of every queue between thread groups.
pub const QUEUE_CAPACITY: usize = 64;
/// How long the data server waits for envelopes the index server has already seen.
const SYNC_WAIT: Duration = Duration::from_secs(2);
/// Unclaimed envelopes on the data server are answered with retry-later after this.
const PENDING_TTL: Duration = Duration::from_secs(30);
/// Bound on a single peer read once a batch is under way.
const PEER_TIMEOUT: Duration = Duration::from_secs(120);
const POLL: Duration = Duration::from_millis(50);
const REPLAY_WINDOW: usize = 1 << 16;

pub struct ServerOptions {
    pub config: NodeConfig,
    pub role: Role,
    pub listen: SocketAddr,
    /// Index server address; required on the data server.
    pub peer: Option<SocketAddr>,
    /// Records every frame this server sends, to the peer and to clients.
    pub transcript: Option<SharedTranscript>,
    pub trace: bool,
    /// Write a snapshot into the state directory on shutdown.
    pub persist: bool,
}

impl ServerOptions {
    pub fn new(config: NodeConfig, role: Role, listen: SocketAddr, peer: Option<SocketAddr>) -> Self {
        ServerOptions {
            config,
            role,
            listen,
            peer,
            transcript: None,
            trace: false,
            persist: false,
        }
    }
}

/// Collect the next batch: block up to `poll` for a first item, then take
/// more until `max_batch` items are in hand or the oldest has waited
/// `max_wait`. Arrival order is preserved.
pub fn batch_dequeue<T>(
    rx: &Receiver<T>,
    cfg: &BatchConfig,
    poll: Duration,
    arrived: impl Fn(&T) -> Instant,
) -> Vec<T> {
    let first = match rx.recv_timeout(poll) {
        Ok(x) => x,
        Err(_) => return Vec::new(),
    };
    let deadline = arrived(&first) + cfg.max_wait;
    let mut out = vec![first];
    while out.len() < cfg.max_batch {
        let now = Instant::now();
        let next = if now >= deadline {
            rx.try_recv().ok()
        } else {
            rx.recv_timeout(deadline - now).ok()
        };
        match next {
            Some(x) => out.push(x),
            None => break,
        }
    }
    out
}

/// What each server announces when the peer link comes up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub role: Role,
    pub params: [u32; 6],
    pub layout_digest: [u8; 32],
    pub root: Digest,
    pub epoch: u64,
}

impl Hello {
    pub fn of(state: &LabelState) -> Hello {
        let lay = &state.layout;
        let p = &lay.params;
        Hello {
            role: state.role,
            params: [
                p.num_blocks,
                p.bucket_size,
                p.payload_len,
                p.stash_capacity,
                p.evictions_per_access,
                lay.record_chunks,
            ],
            layout_digest: lay.digest(),
            root: state.root,
            epoch: state.epoch,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.role.as_u8()];
        for v in self.params {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.layout_digest);
        out.extend_from_slice(&self.root.0);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Hello, NodeError> {
        let mut r = Reader::new(b);
        let role = Role::from_u8(r.u8()?).ok_or_else(|| NodeError::Frame("handshake role".into()))?;
        let mut params = [0u32; 6];
        for p in params.iter_mut() {
            *p = r.u32()?;
        }
        let h = Hello {
            role,
            params,
            layout_digest: r.array()?,
            root: Digest(r.array()?),
            epoch: r.u64()?,
        };
        r.finish()?;
        Ok(h)
    }

    /// Check a peer's announcement against ours.
    pub fn check_peer(&self, peer: &Hello) -> Result<(), NodeError> {
        const NAMES: [&str; 6] = [
            "tree_capacity",
            "bucket_size",
            "payload_len",
            "stash_capacity",
            "evictions_per_access",
            "record_chunks",
        ];
        if peer.role != self.role.peer() {
            return Err(NodeError::ParamMismatch(format!(
                "peer claims role {}, expected {}",
                peer.role,
                self.role.peer()
            )));
        }
        for (i, name) in NAMES.iter().enumerate() {
            if self.params[i] != peer.params[i] {
                return Err(NodeError::ParamMismatch(format!(
                    "{name}: local {} but peer {}",
                    self.params[i], peer.params[i]
                )));
            }
        }
        if self.layout_digest != peer.layout_digest {
            return Err(NodeError::ParamMismatch("layout digests differ".into()));
        }
        if self.root != peer.root {
            return Err(NodeError::ParamMismatch(format!(
                "log roots differ: local {} but peer {}",
                self.root, peer.root
            )));
        }
        if self.epoch != peer.epoch {
            return Err(NodeError::State(format!(
                "epoch mismatch: local {} but peer {}; restore matching snapshots",
                self.epoch, peer.epoch
            )));
        }
        Ok(())
    }
}

type Reply = Arc<Mutex<TcpStream>>;

struct Incoming {
    /// Parsed by the reader thread, or raw when the executor does stage 1.
    session: Result<SessionState, Vec<u8>>,
    reply: Reply,
    arrived: Instant,
}

struct Admitted {
    session: SessionState,
    reply: Reply,
}

/// Commitments seen recently, oldest evicted first.
#[derive(Default)]
struct ReplayGuard {
    set: HashSet<Commitment>,
    order: VecDeque<Commitment>,
}

impl ReplayGuard {
    fn insert(&mut self, c: Commitment) -> bool {
        if !self.set.insert(c) {
            return false;
        }
        self.order.push_back(c);
        if self.order.len() > REPLAY_WINDOW {
            let old = self.order.pop_front().unwrap();
            self.set.remove(&old);
        }
        true
    }
}

/// Envelopes waiting on the data server for the index server to schedule them.
#[derive(Default)]
struct PendingSet {
    map: HashMap<Commitment, (Admitted, Instant)>,
}

struct Shared {
    role: Role,
    layout: Layout,
    pipeline: bool,
    shutdown: AtomicBool,
    connected: AtomicBool,
    executor_done: AtomicBool,
    fatal: Mutex<Option<NodeError>>,
    hello: Mutex<Hello>,
    epoch: AtomicU64,
    batches: AtomicU64,
    replay: Mutex<ReplayGuard>,
    pending: Mutex<PendingSet>,
    pending_cv: Condvar,
    transcript: Option<SharedTranscript>,
    trace: Trace,
}

impl Shared {
    fn response_len(&self) -> usize {
        QUERY_ID_LEN + 1 + self.layout.bundle_len()
    }

    fn send(&self, reply: &Reply, f: Frame) {
        if let Some(t) = &self.transcript {
            t.lock().unwrap().record(&f);
        }
        let mut s = reply.lock().unwrap();
        if let Err(e) = s.write_all(&f.to_bytes()).and_then(|_| s.flush()) {
            log::debug!("client write failed: {e}");
        }
    }

    fn reject(&self, reply: &Reply, id: &[u8; QUERY_ID_LEN], reason: RejectReason) {
        self.send(reply, Frame::new(kind::REJECT, reject_payload(id, reason, self.response_len())));
    }

    /// Stage 1: parse and deduplicate.
    fn admit(&self, payload: &[u8]) -> Result<SessionState, ([u8; QUERY_ID_LEN], RejectReason)> {
        let env = QueryEnvelope::from_bytes(payload).map_err(|_| {
            let mut id = [0u8; QUERY_ID_LEN];
            if payload.len() >= QUERY_ID_LEN {
                id.copy_from_slice(&payload[..QUERY_ID_LEN]);
            }
            (id, RejectReason::Malformed)
        })?;
        if !self.replay.lock().unwrap().insert(env.commitment) {
            log::warn!("duplicate commitment rejected");
            return Err((env.query_id, RejectReason::Duplicate));
        }
        let s = SessionState::new(env);
        self.trace.stage(&s);
        Ok(s)
    }

    fn set_fatal(&self, e: NodeError) {
        log::error!("{e}");
        let mut f = self.fatal.lock().unwrap();
        if f.is_none() {
            *f = Some(e);
        }
        self.shutdown.store(true, Ordering::SeqCst);
    }

    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }
}

/// Stages 7 and 8 for one finished batch.
fn respond(shared: &Shared, done: Vec<(Admitted, Outcome)>) {
    let share_index = match shared.role {
        Role::Data => 1,
        Role::Index => 2,
    };
    for (mut a, outcome) in done {
        let frame = match &outcome {
            Outcome::Allowed(regs) => Frame::new(
                kind::SHARE_RESPONSE,
                ShareResponse {
                    query_id: a.session.query_id(),
                    share_index,
                    proof_share: bundle_share(&shared.layout, regs),
                }
                .to_bytes(),
            ),
            Outcome::Denied => Frame::new(
                kind::REJECT,
                reject_payload(&a.session.query_id(), RejectReason::Denied, shared.response_len()),
            ),
        };
        if a.session.advance(Stage::Shares).is_ok() {
            shared.trace.stage(&a.session);
        }
        shared.send(&a.reply, frame);
        if a.session.advance(Stage::Sent).is_ok() {
            shared.trace.stage(&a.session);
        }
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub role: Role,
    shared: Arc<Shared>,
    pools: Arc<PoolSet>,
    acceptor: Option<JoinHandle<()>>,
    executor: Option<JoinHandle<LabelState>>,
    responder: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn start(opts: ServerOptions, state: LabelState) -> Result<ServerHandle, NodeError> {
        let cfg = &opts.config;
        if state.role != opts.role {
            return Err(NodeError::Config(format!(
                "state file belongs to the {} server, not the {}",
                state.role, opts.role
            )));
        }
        let layout = cfg.layout()?;
        if layout.digest() != state.layout.digest() {
            return Err(NodeError::ParamMismatch(format!(
                "configured parameters (N = {}) do not match the state (N = {})",
                layout.params.num_blocks, state.layout.params.num_blocks
            )));
        }
        let peer = match opts.role {
            Role::Data => Some(opts.peer.ok_or_else(|| NodeError::Config("data server needs --peer".into()))?),
            Role::Index => None,
        };
        let listener = TcpListener::bind(opts.listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;

        let seed = cfg.role_seed(opts.role);
        let templates = Arc::new(Templates::build(&layout)?);
        let (exp_target, circuit_total) = if cfg.precompute {
            (cfg.pool_exponentiations, cfg.pool_circuits)
        } else {
            (0, 0)
        };
        let mut pools = match opts.role {
            Role::Index => {
                let delta: Delta = state
                    .delta
                    .ok_or_else(|| NodeError::State("index state lacks delta".into()))?;
                PoolSet::garbler(&templates, delta, seed, state.epoch, exp_target, circuit_total)
            }
            Role::Data => PoolSet::evaluator(seed, state.epoch, exp_target),
        };
        if cfg.precompute {
            pools.start_fillers(cfg.pool_threads.max(1));
        }
        let pools = Arc::new(pools);
        let party: Box<dyn Party> = match opts.role {
            Role::Index => Box::new(Garbler {
                templates: templates.clone(),
                pool: pools.pool.clone(),
                delta: state.delta.unwrap(),
            }),
            Role::Data => Box::new(Evaluator {
                templates: templates.clone(),
                pool: pools.pool.clone(),
            }),
        };
        let trace = if opts.trace { Trace::default() } else { Trace::disabled() };
        let shared = Arc::new(Shared {
            role: opts.role,
            layout,
            pipeline: cfg.pipeline,
            shutdown: AtomicBool::new(false),
            connected: AtomicBool::new(false),
            executor_done: AtomicBool::new(false),
            fatal: Mutex::new(None),
            hello: Mutex::new(Hello::of(&state)),
            epoch: AtomicU64::new(state.epoch),
            batches: AtomicU64::new(0),
            replay: Mutex::default(),
            pending: Mutex::default(),
            pending_cv: Condvar::new(),
            transcript: opts.transcript.clone(),
            trace: trace.clone(),
        });
        let mut engine = Engine::new(state, templates, party, seed);
        engine.trace = trace;

        let (queue_tx, queue_rx) = mpsc::sync_channel::<Incoming>(QUEUE_CAPACITY);
        let (peer_tx, peer_rx) = mpsc::channel::<Channel>();
        let (resp_tx, resp_rx) = mpsc::sync_channel::<Vec<(Admitted, Outcome)>>(QUEUE_CAPACITY);

        let responder = if cfg.pipeline {
            let sh = shared.clone();
            Some(
                std::thread::Builder::new()
                    .name(format!("{}-respond", opts.role))
                    .spawn(move || {
                        while let Ok(done) = resp_rx.recv() {
                            respond(&sh, done);
                        }
                    })?,
            )
        } else {
            drop(resp_rx);
            None
        };
        let resp_tx = cfg.pipeline.then_some(resp_tx);

        let ex = Executor {
            shared: shared.clone(),
            engine,
            batch: cfg.batch,
            state_dir: cfg.state_dir.clone(),
            snapshot_every: cfg.snapshot_every,
            persist: opts.persist,
            resp_tx,
            transcript: opts.transcript.clone(),
        };
        let executor = match opts.role {
            Role::Index => std::thread::Builder::new()
                .name("index-exec".into())
                .spawn(move || ex.run_leader(queue_rx, peer_rx))?,
            Role::Data => std::thread::Builder::new()
                .name("data-exec".into())
                .spawn(move || ex.run_follower(peer.unwrap()))?,
        };

        let sh = shared.clone();
        let acceptor = std::thread::Builder::new()
            .name(format!("{}-accept", opts.role))
            .spawn(move || accept_loop(sh, listener, queue_tx, peer_tx))?;

        log::info!("{} server listening on {addr}", opts.role);
        Ok(ServerHandle {
            addr,
            role: opts.role,
            shared,
            pools,
            acceptor: Some(acceptor),
            executor: Some(executor),
            responder,
        })
    }

    pub fn trace(&self) -> Trace {
        self.shared.trace.clone()
    }

    pub fn epoch(&self) -> u64 {
        self.shared.epoch.load(Ordering::SeqCst)
    }

    pub fn batches(&self) -> u64 {
        self.shared.batches.load(Ordering::SeqCst)
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::SeqCst)
    }

    /// True once the server has stopped on its own, after a fatal error.
    pub fn has_stopped(&self) -> bool {
        self.shared.executor_done.load(Ordering::SeqCst)
    }

    pub fn take_fatal(&self) -> Option<NodeError> {
        self.shared.fatal.lock().unwrap().take()
    }

    /// Wait until the peer link is up. A fatal startup error, such as a
    /// parameter mismatch, is returned instead.
    pub fn wait_connected(&self, timeout: Duration) -> Result<(), NodeError> {
        let end = Instant::now() + timeout;
        loop {
            if let Some(e) = self.take_fatal() {
                return Err(e);
            }
            if self.is_connected() {
                return Ok(());
            }
            if Instant::now() >= end {
                return Err(NodeError::Timeout);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn wait_pools_full(&self, timeout: Duration) -> bool {
        self.pools.wait_full(timeout)
    }

    pub fn sync_computations(&self) -> u64 {
        self.pools.sync_computations()
    }

    pub fn request_shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
    }

    /// Stop all threads and return the final state. A snapshot is written
    /// first when the server was configured to keep one.
    pub fn stop(mut self) -> Result<LabelState, NodeError> {
        self.request_shutdown();
        self.shared.pending_cv.notify_all();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let state = self
            .executor
            .take()
            .unwrap()
            .join()
            .map_err(|_| NodeError::State("executor panicked".into()))?;
        if let Some(h) = self.responder.take() {
            let _ = h.join();
        }
        match self.take_fatal() {
            Some(e) => Err(e),
            None => Ok(state),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener, queue: SyncSender<Incoming>, peers: mpsc::Sender<Channel>) {
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, from)) => {
                let (sh, q, p) = (shared.clone(), queue.clone(), peers.clone());
                let r = std::thread::Builder::new()
                    .name(format!("{}-conn", shared.role))
                    .spawn(move || {
                        if let Err(e) = serve_connection(&sh, stream, &q, &p) {
                            log::debug!("connection from {from} ended: {e}");
                        }
                    });
                if let Err(e) = r {
                    log::warn!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
}

/// First frame decides what the connection is: a peer handshake (index
/// server only) or a client's queries.
fn serve_connection(
    shared: &Shared,
    stream: TcpStream,
    queue: &SyncSender<Incoming>,
    peers: &mpsc::Sender<Channel>,
) -> Result<(), NodeError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ch = Channel::tcp(stream.try_clone()?)?;
    let first = ch.inbox.recv(Some(Duration::from_secs(30)))?;
    if first.kind == kind::HANDSHAKE {
        if shared.role != Role::Index {
            let _ = ch.send(kind::ABORT, b"data server does not accept peers".to_vec());
            return Err(NodeError::Protocol("peer handshake on the data server".into()));
        }
        let theirs = Hello::from_bytes(&first.payload)?;
        let mine = shared.hello.lock().unwrap().clone();
        if let Err(e) = mine.check_peer(&theirs) {
            log::error!("refusing peer: {e}");
            let _ = ch.send(kind::ABORT, e.to_string().into_bytes());
            return Err(e);
        }
        ch.send(kind::HANDSHAKE, mine.to_bytes())?;
        ch.timeout = Some(PEER_TIMEOUT);
        peers.send(ch).map_err(|_| NodeError::PeerClosed)?;
        return Ok(());
    }
    drop(ch);
    let reply: Reply = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = std::io::BufReader::new(stream);
    let mut frame = first;
    loop {
        if frame.kind != kind::QUERY {
            return Err(NodeError::Protocol(format!("client sent message {:#04x}", frame.kind)));
        }
        accept_query(shared, frame.payload, &reply, queue);
        if shared.stopping() {
            return Ok(());
        }
        frame = Frame::read_from(&mut reader)?;
    }
}

fn accept_query(shared: &Shared, payload: Vec<u8>, reply: &Reply, queue: &SyncSender<Incoming>) {
    let arrived = Instant::now();
    let admitted = if shared.pipeline || shared.role == Role::Data {
        match shared.admit(&payload) {
            Ok(s) => Ok(s),
            Err((id, reason)) => return shared.reject(reply, &id, reason),
        }
    } else {
        Err(payload)
    };
    match shared.role {
        Role::Index => {
            let item = Incoming {
                session: admitted,
                reply: reply.clone(),
                arrived,
            };
            match queue.try_send(item) {
                Ok(()) => {}
                Err(TrySendError::Full(item)) | Err(TrySendError::Disconnected(item)) => {
                    let id = match &item.session {
                        Ok(s) => s.query_id(),
                        Err(raw) => raw.get(..QUERY_ID_LEN).and_then(|b| b.try_into().ok()).unwrap_or_default(),
                    };
                    shared.reject(reply, &id, RejectReason::RetryLater);
                }
            }
        }
        Role::Data => {
            let session = admitted.expect("data server admits on the reader thread");
            let mut p = shared.pending.lock().unwrap();
            if p.map.len() >= QUEUE_CAPACITY {
                drop(p);
                return shared.reject(reply, &session.query_id(), RejectReason::RetryLater);
            }
            let c = session.commitment();
            p.map.insert(
                c,
                (
                    Admitted {
                        session,
                        reply: reply.clone(),
                    },
                    arrived,
                ),
            );
            shared.pending_cv.notify_all();
        }
    }
}

struct Executor {
    shared: Arc<Shared>,
    engine: Engine,
    batch: BatchConfig,
    state_dir: std::path::PathBuf,
    snapshot_every: u64,
    persist: bool,
    resp_tx: Option<SyncSender<Vec<(Admitted, Outcome)>>>,
    transcript: Option<SharedTranscript>,
}

fn sync_payload(epoch: u64, commitments: &[Commitment]) -> Vec<u8> {
    let mut out = epoch.to_be_bytes().to_vec();
    out.extend_from_slice(&(commitments.len() as u16).to_be_bytes());
    for c in commitments {
        out.extend_from_slice(&c.0);
    }
    out
}

fn parse_sync(b: &[u8]) -> Result<(u64, Vec<Commitment>), NodeError> {
    let mut r = Reader::new(b);
    let epoch = r.u64()?;
    let n = r.u16()? as usize;
    let cs = (0..n).map(|_| r.array().map(Commitment)).collect::<Result<_, _>>()?;
    r.finish()?;
    Ok((epoch, cs))
}

fn ack_payload(epoch: u64, present: &[bool]) -> Vec<u8> {
    let mut out = epoch.to_be_bytes().to_vec();
    out.extend_from_slice(&(present.len() as u16).to_be_bytes());
    out.extend_from_slice(&crate::wire::pack_bits(present));
    out
}

fn parse_ack(b: &[u8]) -> Result<(u64, Vec<bool>), NodeError> {
    let mut r = Reader::new(b);
    let epoch = r.u64()?;
    let n = r.u16()? as usize;
    let bits = crate::wire::unpack_bits(r.rest(), n)?;
    Ok((epoch, bits))
}

/// Errors after which the peer link cannot be trusted to be in step.
fn link_broken(e: &NodeError) -> bool {
    matches!(
        e,
        NodeError::Io(_) | NodeError::PeerClosed | NodeError::Timeout | NodeError::Frame(_) | NodeError::Protocol(_)
    )
}

impl Executor {
    /// The executor owns the state; connection threads answer handshakes
    /// with the hello it last published.
    fn publish_hello(&self) {
        *self.shared.hello.lock().unwrap() = Hello::of(&self.engine.state);
    }

    fn attach(&self, mut ch: Channel) -> Channel {
        if let Some(t) = &self.transcript {
            ch.record_into(t.clone());
        }
        ch
    }

    /// Run the batch and hand the results to stages 7 and 8.
    fn execute(&mut self, ch: &mut Channel, mut admitted: Vec<Admitted>) -> Result<(), NodeError> {
        let mut sessions: Vec<SessionState> = admitted.iter().map(|a| a.session.clone()).collect();
        match self.engine.process_batch(ch, &mut sessions) {
            Ok(outcomes) => {
                for (a, s) in admitted.iter_mut().zip(sessions) {
                    a.session = s;
                }
                self.shared.epoch.store(self.engine.state.epoch, Ordering::SeqCst);
                let n = self.shared.batches.fetch_add(1, Ordering::SeqCst) + 1;
                // Persist before anything is acknowledged, so a crash after a
                // reply never rolls the state back behind the peer's.
                if self.snapshot_every > 0 && n % self.snapshot_every == 0 {
                    self.snapshot();
                }
                let done: Vec<_> = admitted.into_iter().zip(outcomes).collect();
                match &self.resp_tx {
                    Some(tx) => {
                        if let Err(mpsc::SendError(done)) = tx.send(done) {
                            respond(&self.shared, done);
                        }
                    }
                    None => respond(&self.shared, done),
                }
                Ok(())
            }
            Err(e) => {
                log::warn!("batch at epoch {} failed: {e}", self.engine.state.epoch);
                for a in &admitted {
                    self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::Failed);
                }
                Err(e)
            }
        }
    }

    fn snapshot(&self) {
        let path = state_file(&self.state_dir, self.shared.role);
        let r = std::fs::create_dir_all(&self.state_dir)
            .map_err(NodeError::from)
            .and_then(|_| self.engine.state.save(&path));
        match r {
            Ok(()) => log::debug!("snapshot at epoch {} written to {}", self.engine.state.epoch, path.display()),
            Err(e) => log::error!("snapshot to {} failed: {e}", path.display()),
        }
    }

    fn finish(self) -> LabelState {
        if self.persist {
            self.snapshot();
        }
        self.shared.connected.store(false, Ordering::SeqCst);
        self.shared.executor_done.store(true, Ordering::SeqCst);
        self.engine.state
    }

    fn run_leader(mut self, queue: Receiver<Incoming>, peers: Receiver<Channel>) -> LabelState {
        self.publish_hello();
        let mut link: Option<Channel> = None;
        while !self.shared.stopping() {
            // A fresh handshake replaces whatever link we had.
            while let Ok(ch) = peers.try_recv() {
                log::info!("peer connected");
                link = Some(self.attach(ch));
                self.shared.connected.store(true, Ordering::SeqCst);
            }
            let items = batch_dequeue(&queue, &self.batch, POLL, |i| i.arrived);
            if items.is_empty() {
                continue;
            }
            let mut admitted = Vec::with_capacity(items.len());
            for it in items {
                let session = match it.session {
                    Ok(s) => s,
                    Err(raw) => match self.shared.admit(&raw) {
                        Ok(s) => s,
                        Err((id, reason)) => {
                            self.shared.reject(&it.reply, &id, reason);
                            continue;
                        }
                    },
                };
                admitted.push(Admitted {
                    session,
                    reply: it.reply,
                });
            }
            if admitted.is_empty() {
                continue;
            }
            if link.is_none() {
                // The peer may be mid-handshake; give it a moment.
                if let Ok(ch) = peers.recv_timeout(Duration::from_secs(1)) {
                    log::info!("peer connected");
                    link = Some(self.attach(ch));
                    self.shared.connected.store(true, Ordering::SeqCst);
                }
            }
            let Some(ch) = link.as_mut() else {
                for a in &admitted {
                    self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::RetryLater);
                }
                continue;
            };
            let epoch = self.engine.state.epoch;
            let cs: Vec<Commitment> = admitted.iter().map(|a| a.session.commitment()).collect();
            let present = ch
                .send(kind::BATCH_SYNC, sync_payload(epoch, &cs))
                .and_then(|_| ch.expect(kind::BATCH_ACK))
                .and_then(|b| parse_ack(&b))
                .and_then(|(e, bits)| {
                    if e != epoch || bits.len() != cs.len() {
                        Err(NodeError::Protocol("batch acknowledgement does not match".into()))
                    } else {
                        Ok(bits)
                    }
                });
            let present = match present {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("lost peer while scheduling: {e}");
                    for a in &admitted {
                        self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::Failed);
                    }
                    link = None;
                    self.shared.connected.store(false, Ordering::SeqCst);
                    continue;
                }
            };
            let mut run = Vec::with_capacity(admitted.len());
            for (a, p) in admitted.into_iter().zip(present) {
                if p {
                    run.push(a);
                } else {
                    self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::RetryLater);
                }
            }
            if run.is_empty() {
                continue;
            }
            let mut ch = link.take().unwrap();
            match self.execute(&mut ch, run) {
                Ok(()) => link = Some(ch),
                Err(e) if link_broken(&e) => {
                    self.shared.connected.store(false, Ordering::SeqCst);
                }
                Err(_) => link = Some(ch),
            }
            self.publish_hello();
        }
        self.finish()
    }

    fn dial(&self, peer: SocketAddr) -> Option<Channel> {
        let mut backoff = Duration::from_millis(50);
        while !self.shared.stopping() {
            match self.try_dial(peer) {
                Ok(ch) => return Some(ch),
                Err(e @ (NodeError::ParamMismatch(_) | NodeError::State(_))) => {
                    self.shared.set_fatal(e);
                    return None;
                }
                Err(NodeError::Protocol(m)) if m.contains("peer aborted") => {
                    self.shared.set_fatal(if m.contains("epoch mismatch") {
                        NodeError::State(m)
                    } else {
                        NodeError::ParamMismatch(m)
                    });
                    return None;
                }
                Err(e) => {
                    log::debug!("dial {peer} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(2));
                }
            }
        }
        None
    }

    fn try_dial(&self, peer: SocketAddr) -> Result<Channel, NodeError> {
        let s = TcpStream::connect_timeout(&peer, Duration::from_secs(2))?;
        let mut ch = self.attach(Channel::tcp(s)?);
        ch.timeout = Some(Duration::from_secs(10));
        let mine = Hello::of(&self.engine.state);
        ch.send(kind::HANDSHAKE, mine.to_bytes())?;
        let theirs = Hello::from_bytes(&ch.expect(kind::HANDSHAKE)?)?;
        mine.check_peer(&theirs)?;
        ch.timeout = Some(PEER_TIMEOUT);
        Ok(ch)
    }

    fn expire_pending(&self) {
        let mut p = self.shared.pending.lock().unwrap();
        let now = Instant::now();
        let old: Vec<Commitment> = p
            .map
            .iter()
            .filter(|(_, (_, t))| now.duration_since(*t) > PENDING_TTL)
            .map(|(c, _)| *c)
            .collect();
        for c in old {
            let (a, _) = p.map.remove(&c).unwrap();
            self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::RetryLater);
        }
    }

    /// Take the announced sessions, waiting briefly for ones still in flight.
    fn claim(&self, cs: &[Commitment]) -> Vec<Option<Admitted>> {
        let end = Instant::now() + SYNC_WAIT;
        let mut p = self.shared.pending.lock().unwrap();
        loop {
            let now = Instant::now();
            if cs.iter().all(|c| p.map.contains_key(c)) || now >= end || self.shared.stopping() {
                break;
            }
            p = self.shared.pending_cv.wait_timeout(p, end - now).unwrap().0;
        }
        cs.iter().map(|c| p.map.remove(c).map(|(a, _)| a)).collect()
    }

    fn run_follower(mut self, peer: SocketAddr) -> LabelState {
        'outer: while !self.shared.stopping() {
            let Some(mut ch) = self.dial(peer) else { break };
            log::info!("connected to index server at {peer}");
            self.shared.connected.store(true, Ordering::SeqCst);
            while !self.shared.stopping() {
                self.expire_pending();
                let f = match ch.inbox.recv(Some(POLL)) {
                    Ok(f) => f,
                    Err(NodeError::Timeout) => continue,
                    Err(e) => {
                        log::warn!("lost index server: {e}; reconnecting");
                        break;
                    }
                };
                if f.kind == kind::ABORT {
                    log::warn!("index server aborted: {}", String::from_utf8_lossy(&f.payload));
                    break;
                }
                if f.kind != kind::BATCH_SYNC {
                    log::warn!("unexpected message {:#04x} from index server; reconnecting", f.kind);
                    break;
                }
                let (epoch, cs) = match parse_sync(&f.payload) {
                    Ok(x) => x,
                    Err(e) => {
                        log::warn!("bad batch announcement: {e}");
                        break;
                    }
                };
                if epoch != self.engine.state.epoch {
                    let _ = ch.send(kind::ABORT, b"epoch mismatch".to_vec());
                    self.shared.set_fatal(NodeError::State(format!(
                        "index server is at epoch {epoch}, local state at {}",
                        self.engine.state.epoch
                    )));
                    break 'outer;
                }
                let claimed = self.claim(&cs);
                let present: Vec<bool> = claimed.iter().map(Option::is_some).collect();
                if let Err(e) = ch.send(kind::BATCH_ACK, ack_payload(epoch, &present)) {
                    log::warn!("lost index server: {e}");
                    for a in claimed.into_iter().flatten() {
                        self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::Failed);
                    }
                    break;
                }
                let run: Vec<Admitted> = claimed.into_iter().flatten().collect();
                if run.is_empty() {
                    continue;
                }
                if let Err(e) = self.execute(&mut ch, run) {
                    if link_broken(&e) {
                        break;
                    }
                }
            }
            self.shared.connected.store(false, Ordering::SeqCst);
        }
        // Anything still waiting will not be served by this process.
        let drained: Vec<_> = self.shared.pending.lock().unwrap().map.drain().collect();
        for (_, (a, _)) in drained {
            self.shared.reject(&a.reply, &a.session.query_id(), RejectReason::Failed);
        }
        self.finish()
    }
}

/// Parse a reject frame's reason, for tools that inspect raw replies.
pub fn reject_reason(f: &Frame) -> Option<RejectReason> {
    (f.kind == kind::REJECT).then(|| parse_reject(&f.payload).ok().map(|r| r.1)).flatten()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dequeue_respects_max_batch() {
        let (tx, rx) = mpsc::sync_channel::<Instant>(QUEUE_CAPACITY);
        let t = Instant::now();
        for _ in 0..10 {
            tx.send(t).unwrap();
        }
        let cfg = BatchConfig {
            max_batch: 4,
            max_wait: Duration::from_millis(20),
        };
        let sizes: Vec<usize> = (0..3).map(|_| batch_dequeue(&rx, &cfg, POLL, |x| *x).len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batch_dequeue(&rx, &cfg, Duration::from_millis(1), |x| *x).is_empty());
    }

    #[test]
    fn dequeue_dispatches_on_wait() {
        let (tx, rx) = mpsc::sync_channel::<Instant>(QUEUE_CAPACITY);
        tx.send(Instant::now()).unwrap();
        let cfg = BatchConfig {
            max_batch: 16,
            max_wait: Duration::from_millis(30),
        };
        let start = Instant::now();
        assert_eq!(batch_dequeue(&rx, &cfg, POLL, |x| *x).len(), 1);
        let waited = start.elapsed();
        assert!(waited >= Duration::from_millis(25) && waited < Duration::from_secs(2), "{waited:?}");
    }

    #[test]
    fn sync_and_ack_round_trip() {
        let cs = vec![Commitment([1; 32]), Commitment([2; 32])];
        assert_eq!(parse_sync(&sync_payload(7, &cs)).unwrap(), (7, cs));
        let bits = vec![true, false, true];
        assert_eq!(parse_ack(&ack_payload(9, &bits)).unwrap(), (9, bits));
    }

    #[test]
    fn replay_guard_window() {
        let mut g = ReplayGuard::default();
        assert!(g.insert(Commitment([1; 32])));
        assert!(!g.insert(Commitment([1; 32])));
    }
}

