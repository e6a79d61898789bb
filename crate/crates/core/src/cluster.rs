//! Master–worker trajectory farm.
//!
//! The protocol is written as two transport-free state machines
//! ([`MasterMachine`], [`WorkerMachine`]) driven by small loops over a
//! [`Channel`]. Channels carry encoded frames, so the in-process transport and
//! the TCP transport move byte-identical data. See `docs/wire-format.md` for
//! the frame layout.
//!
//! Roles: workers are ranks `0..n_workers`, the master is rank `n_workers`
//! and never computes trajectories. Worker `k` draws from
//! `Lfsr113::derive_stream(master_seed, k)`, so results are reproducible per
//! `(seed, n_workers)` pair.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::linalg::CsrMatrix;
use crate::ode::{Corrector, Method};
use crate::rng::Lfsr113;
use crate::trajectory::{
    average_trajectories, run_single_trajectory, Generator, Jump, QuantumProblem, TrajectoryError, TrajectoryResult,
};

pub const WIRE_VERSION: u8 = 1;
const MAX_FRAME: usize = 1 << 30;

const TAG_HELLO: u8 = 0;
const TAG_INIT: u8 = 1;
const TAG_COMPUTE: u8 = 2;
const TAG_RESULT: u8 = 3;
const TAG_ERROR: u8 = 4;
const TAG_SHUTDOWN: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Master,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub rank: u32,
    pub role: Role,
}

impl NodeId {
    pub fn master(n_workers: usize) -> Self {
        Self {
            rank: n_workers as u32,
            role: Role::Master,
        }
    }

    pub fn worker(rank: u32) -> Self {
        Self {
            rank,
            role: Role::Worker,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// First frame on a TCP connection: identifies the connecting worker.
    Hello { rank: u32 },
    Init {
        master_seed: u64,
        problem_digest: u64,
        assigned_count: u64,
    },
    Compute,
    Result { partial: TrajectoryResult },
    Error { rank: u32, description: String },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unknown message tag {0}")]
    Tag(u8),
    #[error("frame length {0} exceeds the limit")]
    TooLong(usize),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("malformed field: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("wire format: {0}")]
    Wire(#[from] WireError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("channel to worker {rank} closed before the run finished")]
    ChannelClosed { rank: u32 },
    #[error("worker failure: {}", format_failures(.0))]
    WorkerFailed(Vec<(u32, String)>),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn format_failures(f: &[(u32, String)]) -> String {
    f.iter()
        .map(|(r, d)| format!("[rank {r}] {d}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<io::Error> for ClusterError {
    fn from(e: io::Error) -> Self {
        ClusterError::Transport(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ClusterError>;

// ---------------------------------------------------------------------------
// Encoding

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
    fn csr(&mut self, m: &CsrMatrix) {
        self.len(m.dim());
        self.len(m.nnz());
        for &p in m.row_ptr() {
            self.u64(p as u64);
        }
        for &c in m.col_ind() {
            self.u64(c as u64);
        }
        for v in m.values() {
            self.f64(v.re);
            self.f64(v.im);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn count(&mut self, elem_size: usize) -> std::result::Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }
}

/// Encodes one message as a complete frame: `u32` LE length of the rest,
/// version byte, tag byte, fields.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut e = Enc::default();
    e.u32(0);
    e.u8(WIRE_VERSION);
    match msg {
        Message::Hello { rank } => {
            e.u8(TAG_HELLO);
            e.u32(*rank);
        }
        Message::Init {
            master_seed,
            problem_digest,
            assigned_count,
        } => {
            e.u8(TAG_INIT);
            e.u64(*master_seed);
            e.u64(*problem_digest);
            e.u64(*assigned_count);
        }
        Message::Compute => e.u8(TAG_COMPUTE),
        Message::Result { partial } => {
            e.u8(TAG_RESULT);
            e.u64(partial.n_trajectories);
            e.len(partial.times.len());
            for &t in &partial.times {
                e.f64(t);
            }
            e.len(partial.values.len());
            for row in &partial.values {
                for &v in row {
                    e.f64(v);
                }
            }
            match &partial.jumps {
                None => e.u8(0),
                Some(js) => {
                    e.u8(1);
                    e.len(js.len());
                    for j in js {
                        e.f64(j.t);
                        e.len(j.channel);
                    }
                }
            }
        }
        Message::Error { rank, description } => {
            e.u8(TAG_ERROR);
            e.u32(*rank);
            e.bytes(description.as_bytes());
        }
        Message::Shutdown => e.u8(TAG_SHUTDOWN),
    }
    let body = (e.0.len() - 4) as u32;
    e.0[..4].copy_from_slice(&body.to_le_bytes());
    e.0
}

/// Decodes the body of a frame (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> std::result::Result<Message, WireError> {
    let mut d = Dec { buf: body, pos: 0 };
    let version = d.u8()?;
    if version != WIRE_VERSION {
        return Err(WireError::Version(version));
    }
    let msg = match d.u8()? {
        TAG_HELLO => Message::Hello { rank: d.u32()? },
        TAG_INIT => Message::Init {
            master_seed: d.u64()?,
            problem_digest: d.u64()?,
            assigned_count: d.u64()?,
        },
        TAG_COMPUTE => Message::Compute,
        TAG_RESULT => {
            let n_trajectories = d.u64()?;
            let nt = d.count(8)?;
            let times = (0..nt).map(|_| d.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let ne = d.u32()? as usize;
            if ne.saturating_mul(nt).saturating_mul(8) > body.len() {
                return Err(WireError::Truncated);
            }
            let mut values = Vec::with_capacity(ne);
            for _ in 0..ne {
                values.push((0..nt).map(|_| d.f64()).collect::<std::result::Result<Vec<_>, _>>()?);
            }
            let jumps = match d.u8()? {
                0 => None,
                1 => {
                    let nj = d.count(12)?;
                    let mut js = Vec::with_capacity(nj);
                    for _ in 0..nj {
                        js.push(Jump {
                            t: d.f64()?,
                            channel: d.u32()? as usize,
                        });
                    }
                    Some(js)
                }
                f => return Err(WireError::Malformed(format!("jump flag {f}"))),
            };
            Message::Result {
                partial: TrajectoryResult {
                    times,
                    values,
                    n_trajectories,
                    jumps,
                },
            }
        }
        TAG_ERROR => {
            let rank = d.u32()?;
            let n = d.count(1)?;
            let description = String::from_utf8(d.take(n)?.to_vec())
                .map_err(|_| WireError::Malformed("description is not UTF-8".into()))?;
            Message::Error { rank, description }
        }
        TAG_SHUTDOWN => Message::Shutdown,
        t => return Err(WireError::Tag(t)),
    };
    if d.pos != body.len() {
        return Err(WireError::Trailing(body.len() - d.pos));
    }
    Ok(msg)
}

/// Decodes one complete frame including its length prefix.
pub fn decode_frame(frame: &[u8]) -> std::result::Result<Message, WireError> {
    let len_bytes = frame.get(..4).ok_or(WireError::Truncated)?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLong(len));
    }
    let body = frame.get(4..).ok_or(WireError::Truncated)?;
    if body.len() < len {
        return Err(WireError::Truncated);
    }
    if body.len() > len {
        return Err(WireError::Trailing(body.len() - len));
    }
    decode_body(body)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLong(len).into());
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(decode_body(&body)?)
}

// ---------------------------------------------------------------------------
// Problem digest

/// FNV-1a 64 over the serialised problem. Run options are excluded: they only
/// affect where output goes.
pub fn problem_digest(p: &QuantumProblem) -> u64 {
    let mut e = Enc::default();
    e.u8(1);
    match &p.generator {
        Generator::Constant(g) => {
            e.u8(0);
            e.csr(g);
        }
        Generator::TimeDependent { label, dim, .. } => {
            e.u8(1);
            e.len(*dim);
            e.bytes(label.as_bytes());
        }
    }
    for list in [&p.collapse, &p.expect] {
        e.len(list.len());
        for m in list.iter() {
            e.csr(m);
        }
    }
    e.len(p.psi0.dim());
    for z in p.psi0.iter() {
        e.f64(z.re);
        e.f64(z.im);
    }
    e.f64(p.t_from);
    e.f64(p.t_to);
    e.u64(p.n_steps as u64);
    let o = &p.ode;
    e.u8(match o.method {
        Method::Adams => 0,
        Method::Bdf => 1,
    });
    e.u8(match o.corrector() {
        Corrector::Functional => 0,
        Corrector::Newton => 1,
    });
    e.f64(o.rtol);
    e.f64(o.atol);
    e.u64(o.max_order as u64);
    e.u64(o.max_steps as u64);
    e.f64(o.initial_step.unwrap_or(0.0));
    fnv1a64(&e.0)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

// ---------------------------------------------------------------------------
// Work split and per-worker computation

/// Even split with the remainder on the lowest ranks.
pub fn partition_trajectories(n_total: u64, n_workers: usize) -> Result<Vec<u64>> {
    if n_total < 1 {
        return Err(ClusterError::InvalidPartition("need at least one trajectory".into()));
    }
    if n_workers < 1 {
        return Err(ClusterError::InvalidPartition("need at least one worker".into()));
    }
    let (q, r) = (n_total / n_workers as u64, n_total % n_workers as u64);
    Ok((0..n_workers as u64).map(|k| q + u64::from(k < r)).collect())
}

/// Runs `count` trajectories sequentially on the stream of `rank` and returns
/// their average. `count = 0` yields a zero-filled, zero-count result.
pub fn run_batch(p: &QuantumProblem, master_seed: u64, rank: u32, count: u64) -> Result<TrajectoryResult> {
    let mut rng = Lfsr113::derive_stream(master_seed, u64::from(rank));
    if count == 0 {
        p.validate()?;
        return Ok(TrajectoryResult::empty(p.times(), p.expect.len()));
    }
    let mut results = Vec::with_capacity(count as usize);
    for i in 0..count {
        let r = run_single_trajectory(p, &mut rng).map_err(|e| e.with_trajectory(i))?;
        results.push(r);
    }
    Ok(average_trajectories(&results)?)
}

// ---------------------------------------------------------------------------
// State machines

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Computing,
    Done,
    Failed,
}

/// Master protocol state. Feeding it messages returns the frames to send as
/// `(worker rank, message)` pairs.
#[derive(Debug, Clone)]
pub struct MasterMachine {
    seed: u64,
    digest: u64,
    counts: Vec<u64>,
    slots: Vec<Option<TrajectoryResult>>,
    states: Vec<SlotState>,
    failures: Vec<(u32, String)>,
    shut_down: bool,
}

impl MasterMachine {
    pub fn new(n_total: u64, n_workers: usize, master_seed: u64, problem_digest: u64) -> Result<Self> {
        let counts = partition_trajectories(n_total, n_workers)?;
        Ok(Self {
            seed: master_seed,
            digest: problem_digest,
            slots: vec![None; n_workers],
            states: vec![SlotState::Computing; n_workers],
            counts,
            failures: Vec::new(),
            shut_down: false,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Init and Compute for every worker.
    pub fn start(&self) -> Vec<(usize, Message)> {
        let mut out = Vec::with_capacity(2 * self.n_workers());
        for (k, &c) in self.counts.iter().enumerate() {
            out.push((
                k,
                Message::Init {
                    master_seed: self.seed,
                    problem_digest: self.digest,
                    assigned_count: c,
                },
            ));
            out.push((k, Message::Compute));
        }
        out
    }

    pub fn on_message(&mut self, rank: usize, msg: Message) -> Vec<(usize, Message)> {
        if rank >= self.n_workers() || self.shut_down {
            return Vec::new();
        }
        match msg {
            Message::Result { partial } if self.states[rank] == SlotState::Computing => {
                if partial.n_trajectories != self.counts[rank] {
                    self.failures.push((
                        rank as u32,
                        format!(
                            "returned {} trajectories, {} assigned",
                            partial.n_trajectories, self.counts[rank]
                        ),
                    ));
                    self.states[rank] = SlotState::Failed;
                } else {
                    self.slots[rank] = Some(partial);
                    self.states[rank] = SlotState::Done;
                }
            }
            Message::Error { rank: r, description } => {
                self.failures.push((r, description));
                self.states[rank] = SlotState::Failed;
            }
            other => {
                self.failures.push((rank as u32, format!("unexpected message {}", message_name(&other))));
                self.states[rank] = SlotState::Failed;
            }
        }
        let failed = !self.failures.is_empty();
        let all_done = self.states.iter().all(|s| *s == SlotState::Done);
        if failed || all_done {
            self.shutdown()
        } else {
            Vec::new()
        }
    }

    /// Abort path for a closed channel.
    pub fn on_channel_closed(&mut self, rank: usize) -> Vec<(usize, Message)> {
        if self.shut_down || rank >= self.n_workers() {
            return Vec::new();
        }
        self.failures.push((rank as u32, "channel closed before the run finished".into()));
        self.states[rank] = SlotState::Failed;
        self.shutdown()
    }

    fn shutdown(&mut self) -> Vec<(usize, Message)> {
        self.shut_down = true;
        (0..self.n_workers()).map(|k| (k, Message::Shutdown)).collect()
    }

    pub fn is_finished(&self) -> bool {
        self.shut_down
    }

    /// Weighted average over the rank-indexed slots, independent of arrival
    /// order.
    pub fn finish(self) -> Result<TrajectoryResult> {
        if !self.failures.is_empty() {
            return Err(ClusterError::WorkerFailed(self.failures));
        }
        if !self.shut_down {
            return Err(ClusterError::Protocol("run not finished".into()));
        }
        let parts: Vec<TrajectoryResult> = self.slots.into_iter().map(|s| s.expect("all done")).collect();
        Ok(average_trajectories(&parts)?)
    }
}

fn message_name(m: &Message) -> &'static str {
    match m {
        Message::Hello { .. } => "Hello",
        Message::Init { .. } => "Init",
        Message::Compute => "Compute",
        Message::Result { .. } => "Result",
        Message::Error { .. } => "Error",
        Message::Shutdown => "Shutdown",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkerAction {
    Send(Message),
    /// Run the assigned batch and report it through [`WorkerMachine::on_computed`].
    Compute { master_seed: u64, count: u64 },
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerState {
    AwaitInit,
    AwaitCompute { master_seed: u64, count: u64 },
    Computing,
    AwaitShutdown,
    Exited,
}

#[derive(Debug, Clone)]
pub struct WorkerMachine {
    rank: u32,
    digest: u64,
    state: WorkerState,
}

impl WorkerMachine {
    pub fn new(rank: u32, problem_digest: u64) -> Self {
        Self {
            rank,
            digest: problem_digest,
            state: WorkerState::AwaitInit,
        }
    }

    pub fn has_exited(&self) -> bool {
        self.state == WorkerState::Exited
    }

    pub fn on_message(&mut self, msg: Message) -> Vec<WorkerAction> {
        match (self.state, msg) {
            (_, Message::Shutdown) => {
                self.state = WorkerState::Exited;
                vec![WorkerAction::Exit]
            }
            (
                WorkerState::AwaitInit,
                Message::Init {
                    master_seed,
                    problem_digest,
                    assigned_count,
                },
            ) => {
                if problem_digest != self.digest {
                    self.state = WorkerState::AwaitShutdown;
                    return vec![WorkerAction::Send(self.error(format!(
                        "problem digest mismatch: master {problem_digest:016x}, worker {:016x}",
                        self.digest
                    )))];
                }
                self.state = WorkerState::AwaitCompute {
                    master_seed,
                    count: assigned_count,
                };
                Vec::new()
            }
            (WorkerState::AwaitCompute { master_seed, count }, Message::Compute) => {
                self.state = WorkerState::Computing;
                vec![WorkerAction::Compute { master_seed, count }]
            }
            // After a refused Init the Compute that follows is ignored.
            (WorkerState::AwaitShutdown, _) => Vec::new(),
            (_, other) => {
                self.state = WorkerState::AwaitShutdown;
                vec![WorkerAction::Send(
                    self.error(format!("unexpected message {}", message_name(&other))),
                )]
            }
        }
    }

    pub fn on_computed(&mut self, outcome: std::result::Result<TrajectoryResult, String>) -> Vec<WorkerAction> {
        if self.state != WorkerState::Computing {
            return Vec::new();
        }
        self.state = WorkerState::AwaitShutdown;
        vec![WorkerAction::Send(match outcome {
            Ok(partial) => Message::Result { partial },
            Err(description) => self.error(description),
        })]
    }

    fn error(&self, description: String) -> Message {
        Message::Error {
            rank: self.rank,
            description,
        }
    }
}

// ---------------------------------------------------------------------------
// Transports

pub trait FrameSender: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
}

pub trait FrameReceiver: Send {
    fn recv(&mut self) -> Result<Message>;
}

/// One end of a reliable, ordered duplex channel.
pub struct Channel {
    pub tx: Box<dyn FrameSender>,
    pub rx: Box<dyn FrameReceiver>,
}

impl Channel {
    pub fn send(&mut self, msg: &Message) -> Result<()> {
        self.tx.send(msg)
    }

    pub fn recv(&mut self) -> Result<Message> {
        self.rx.recv()
    }
}

struct QueueSender(mpsc::Sender<Vec<u8>>);
struct QueueReceiver(mpsc::Receiver<Vec<u8>>);

impl FrameSender for QueueSender {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.0
            .send(encode_frame(msg))
            .map_err(|_| ClusterError::Transport("peer queue closed".into()))
    }
}

impl FrameReceiver for QueueReceiver {
    fn recv(&mut self) -> Result<Message> {
        let frame = self
            .0
            .recv()
            .map_err(|_| ClusterError::Transport("peer queue closed".into()))?;
        Ok(decode_frame(&frame)?)
    }
}

/// Connected in-process channel ends `(master side, worker side)`.
pub fn in_process_pair() -> (Channel, Channel) {
    let (to_worker, worker_rx) = mpsc::channel();
    let (to_master, master_rx) = mpsc::channel();
    (
        Channel {
            tx: Box::new(QueueSender(to_worker)),
            rx: Box::new(QueueReceiver(master_rx)),
        },
        Channel {
            tx: Box::new(QueueSender(to_master)),
            rx: Box::new(QueueReceiver(worker_rx)),
        },
    )
}

struct TcpSender(BufWriter<TcpStream>);
struct TcpReceiver(BufReader<TcpStream>);

impl FrameSender for TcpSender {
    fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut self.0, msg)
    }
}

impl FrameReceiver for TcpReceiver {
    fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.0)
    }
}

fn tcp_channel(stream: TcpStream) -> Result<Channel> {
    stream.set_nodelay(true)?;
    let rx = stream.try_clone()?;
    Ok(Channel {
        tx: Box::new(TcpSender(BufWriter::new(stream))),
        rx: Box::new(TcpReceiver(BufReader::new(rx))),
    })
}

/// Accepts `n_workers` connections and orders them by the rank each worker
/// announces in its Hello frame.
pub fn accept_workers(listener: &TcpListener, n_workers: usize) -> Result<Vec<Channel>> {
    let mut slots: Vec<Option<Channel>> = (0..n_workers).map(|_| None).collect();
    let mut connected = 0;
    while connected < n_workers {
        let (stream, _) = listener.accept()?;
        let mut ch = tcp_channel(stream)?;
        let rank = match ch.recv()? {
            Message::Hello { rank } => rank as usize,
            other => {
                return Err(ClusterError::Protocol(format!(
                    "expected Hello, got {}",
                    message_name(&other)
                )))
            }
        };
        match slots.get_mut(rank) {
            Some(slot @ None) => {
                *slot = Some(ch);
                connected += 1;
            }
            Some(Some(_)) => return Err(ClusterError::Protocol(format!("rank {rank} connected twice"))),
            None => {
                return Err(ClusterError::Protocol(format!(
                    "rank {rank} outside 0..{n_workers}"
                )))
            }
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all connected")).collect())
}

/// Connects to a master, retrying until `patience` elapses, and announces
/// `rank`.
pub fn connect_worker<A: ToSocketAddrs + Clone>(addr: A, rank: u32, patience: Duration) -> Result<Channel> {
    let deadline = Instant::now() + patience;
    let stream = loop {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(e.into()),
        }
    };
    let mut ch = tcp_channel(stream)?;
    ch.send(&Message::Hello { rank })?;
    Ok(ch)
}

// ---------------------------------------------------------------------------
// Drivers

/// Worker loop: follows the protocol until Shutdown.
pub fn run_worker(channel: &mut Channel, problem: &QuantumProblem, rank: u32) -> Result<()> {
    let digest = problem_digest(problem);
    let mut machine = WorkerMachine::new(rank, digest);
    let mut pending: Vec<WorkerAction> = Vec::new();
    loop {
        if pending.is_empty() {
            let msg = channel.recv()?;
            pending = machine.on_message(msg);
            continue;
        }
        for action in std::mem::take(&mut pending) {
            match action {
                WorkerAction::Send(m) => channel.send(&m)?,
                WorkerAction::Compute { master_seed, count } => {
                    let outcome = run_batch(problem, master_seed, rank, count).map_err(|e| e.to_string());
                    pending.extend(machine.on_computed(outcome));
                }
                WorkerAction::Exit => return Ok(()),
            }
        }
    }
}

/// Master loop over rank-indexed channels. Each channel's receiving half is
/// serviced by its own thread; results are reduced here in rank order.
pub fn run_master(channels: Vec<Channel>, problem: &QuantumProblem, n_total: u64, master_seed: u64) -> Result<TrajectoryResult> {
    problem.validate()?;
    let n_workers = channels.len();
    let mut machine = MasterMachine::new(n_total, n_workers, master_seed, problem_digest(problem))?;
    let (events_tx, events_rx) = mpsc::channel::<(usize, Result<Message>)>();
    let mut senders = Vec::with_capacity(n_workers);
    for (rank, ch) in channels.into_iter().enumerate() {
        let Channel { tx, mut rx } = ch;
        senders.push(tx);
        let events = events_tx.clone();
        thread::spawn(move || loop {
            let m = rx.recv();
            let stop = m.is_err() || matches!(m, Ok(Message::Result { .. }) | Ok(Message::Error { .. }));
            if events.send((rank, m)).is_err() || stop {
                break;
            }
        });
    }
    drop(events_tx);

    let mut transport_error: Option<ClusterError> = None;
    let send_all = |out: Vec<(usize, Message)>, senders: &mut Vec<Box<dyn FrameSender>>| {
        for (k, m) in out {
            if let Err(e) = senders[k].send(&m) {
                // Shutdown to an already-gone worker is harmless.
                if !matches!(m, Message::Shutdown) {
                    return Err((k, e));
                }
            }
        }
        Ok(())
    };
    if let Err((k, e)) = send_all(machine.start(), &mut senders) {
        let _ = send_all(machine.on_channel_closed(k), &mut senders);
        return Err(match e {
            ClusterError::Transport(_) => ClusterError::ChannelClosed { rank: k as u32 },
            other => other,
        });
    }
    while !machine.is_finished() {
        let Ok((rank, event)) = events_rx.recv() else {
            return Err(ClusterError::Protocol("all worker channels closed".into()));
        };
        let out = match event {
            Ok(msg) => machine.on_message(rank, msg),
            Err(e) => {
                if transport_error.is_none() {
                    transport_error = Some(match e {
                        ClusterError::Transport(_) => ClusterError::ChannelClosed { rank: rank as u32 },
                        other => other,
                    });
                }
                machine.on_channel_closed(rank)
            }
        };
        let _ = send_all(out, &mut senders);
    }
    if let Some(e) = transport_error {
        return Err(e);
    }
    machine.finish()
}

/// Runs the farm with `n_workers` in-process worker threads; `n_workers = 0`
/// computes inline on the rank-0 stream (identical to one worker).
pub fn run_local(problem: &QuantumProblem, n_total: u64, n_workers: usize, master_seed: u64) -> Result<TrajectoryResult> {
    if n_total < 1 {
        return Err(ClusterError::InvalidPartition("need at least one trajectory".into()));
    }
    if n_workers == 0 {
        return run_batch(problem, master_seed, 0, n_total);
    }
    thread::scope(|s| {
        let mut master_ends = Vec::with_capacity(n_workers);
        let mut handles = Vec::with_capacity(n_workers);
        for rank in 0..n_workers {
            let (m, mut w) = in_process_pair();
            master_ends.push(m);
            handles.push(s.spawn(move || run_worker(&mut w, problem, rank as u32)));
        }
        let out = run_master(master_ends, problem, n_total, master_seed);
        for h in handles {
            let _ = h.join();
        }
        out
    })
}
