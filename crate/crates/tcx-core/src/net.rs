//! Transport carriers. Every inter-actor byte travels in frames of
//! 4-byte big-endian length ∥ payload, over one of two interchangeable
//! carriers:
//!
//! * [`SimNet`] — an in-process switch. Dialing a name hands both sides a
//!   queue-pair connection; every frame passes through the switch, where
//!   it is logged to the transcript and optionally run through an
//!   adversary hook that may observe, rewrite, drop, or inject frames.
//! * [`TcpNet`] — the same interface over local TCP sockets, for running
//!   the actors as separate processes.
//!
//! Actors that live inside the host process (the root VM service, the
//! per-VM agents) are reached through host-routed [`pipe_pair`]
//! connections in both modes; only machine-to-machine traffic crosses the
//! switch or a socket.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

/// Upper bound on a single frame; matches the wire field limit.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("no endpoint named {0:?}")]
    Refused(String),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("transport error: {0}")]
    Io(String),
}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => NetError::Timeout,
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::BrokenPipe => NetError::Closed,
            _ => NetError::Io(e.to_string()),
        }
    }
}

/// One reliable, ordered, framed duplex connection. Implementations use
/// interior mutability so both halves of a proxy can share one handle.
pub trait Conn: Send + Sync {
    fn send(&self, frame: &[u8]) -> Result<(), NetError>;
    fn recv(&self) -> Result<Vec<u8>, NetError>;
    /// Half-close: the peer drains queued frames, then sees `Closed`.
    fn close(&self);
}

pub type BoxConn = Box<dyn Conn>;

pub trait Listener: Send {
    fn accept(&self) -> Result<BoxConn, NetError>;
}

/// A carrier: how actors reach each other by name.
pub trait Net: Send + Sync {
    fn dial(&self, from: &str, to: &str) -> Result<BoxConn, NetError>;
    fn listen(&self, name: &str) -> Result<Box<dyn Listener>, NetError>;
}

// ---------------------------------------------------------------------------
// In-process queue pair

struct Lane {
    queue: Mutex<(VecDeque<Vec<u8>>, bool)>, // (frames, closed)
    ready: Condvar,
}

impl Lane {
    fn new() -> Self {
        Lane {
            queue: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        }
    }

    fn push(&self, frame: Vec<u8>) -> Result<(), NetError> {
        let mut q = self.queue.lock().unwrap();
        if q.1 {
            return Err(NetError::Closed);
        }
        q.0.push_back(frame);
        self.ready.notify_one();
        Ok(())
    }

    fn pop(&self, timeout: Duration) -> Result<Vec<u8>, NetError> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if let Some(f) = q.0.pop_front() {
                return Ok(f);
            }
            if q.1 {
                return Err(NetError::Closed);
            }
            let (guard, res) = self.ready.wait_timeout(q, timeout).unwrap();
            q = guard;
            if res.timed_out() && q.0.is_empty() {
                return Err(if q.1 { NetError::Closed } else { NetError::Timeout });
            }
        }
    }

    fn close(&self) {
        self.queue.lock().unwrap().1 = true;
        self.ready.notify_all();
    }
}

/// One endpoint of an in-process duplex pipe.
pub struct PipeConn {
    tx: Arc<Lane>,
    rx: Arc<Lane>,
    timeout: Duration,
}

impl Conn for PipeConn {
    fn send(&self, frame: &[u8]) -> Result<(), NetError> {
        if frame.len() > MAX_FRAME_LEN {
            return Err(NetError::FrameTooLarge(frame.len()));
        }
        self.tx.push(frame.to_vec())
    }

    fn recv(&self) -> Result<Vec<u8>, NetError> {
        self.rx.pop(self.timeout)
    }

    fn close(&self) {
        self.tx.close();
    }
}

impl Drop for PipeConn {
    fn drop(&mut self) {
        self.tx.close();
    }
}

/// A connected pair of in-process endpoints.
pub fn pipe_pair() -> (PipeConn, PipeConn) {
    pipe_pair_with_timeout(DEFAULT_TIMEOUT)
}

pub fn pipe_pair_with_timeout(timeout: Duration) -> (PipeConn, PipeConn) {
    let a = Arc::new(Lane::new());
    let b = Arc::new(Lane::new());
    (
        PipeConn {
            tx: a.clone(),
            rx: b.clone(),
            timeout,
        },
        PipeConn {
            tx: b,
            rx: a,
            timeout,
        },
    )
}

// ---------------------------------------------------------------------------
// Adversary hooks

/// Which link a frame is crossing, as the switch sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkInfo {
    pub conn_id: u64,
    /// Name of the frame's sender for this direction.
    pub from: String,
    /// Name of the receiving endpoint.
    pub to: String,
}

/// What the adversary decides for one forwarded frame.
pub enum FrameAction {
    /// Deliver these bytes (possibly rewritten).
    Deliver(Vec<u8>),
    /// Silently swallow the frame.
    Drop,
    /// Deliver `first`, then inject `extra` frames on the same link.
    Inject { first: Vec<u8>, extra: Vec<Vec<u8>> },
}

/// On-path attacker. Sees every frame the switch forwards, in order, and
/// may rewrite, suppress, or duplicate it. Purely observational hooks
/// return the frame unchanged.
pub trait Adversary: Send {
    fn on_frame(&mut self, link: &LinkInfo, seq: u64, frame: &[u8]) -> FrameAction;
}

// ---------------------------------------------------------------------------
// Transcript events

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// A connection was opened (`actor` dialed `label`).
    Open,
    /// A frame crossed the switch.
    Frame,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetEvent {
    pub kind: EventKind,
    pub conn_id: u64,
    /// Per-connection sequence number, starting at 0 for the Open event.
    pub seq: u64,
    pub actor: String,
    /// Peer name for Open; empty for frames.
    pub label: String,
    /// First message-type byte of the frame, if one is present.
    pub tag: Option<u8>,
    /// SHA-256 of the frame bytes (or of the peer name for Open).
    pub digest: [u8; 32],
}

/// Pulls the leading 1-byte message-type field out of a frame laid out in
/// the canonical wire form (a one-byte field is encoded as 00 00 00 01 t).
pub fn frame_tag(frame: &[u8]) -> Option<u8> {
    if frame.len() >= 5 && frame[..4] == [0, 0, 0, 1] {
        Some(frame[4])
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// The in-process switch

struct SimConnState {
    link: LinkInfo, // from = dialer
    seq: u64,
}

struct SimInner {
    listeners: Mutex<HashMap<String, Arc<Lane>>>, // lane of serialized conn ids
    pending: Mutex<HashMap<u64, SimConn>>,        // accept-side handoff
    events: Mutex<Vec<NetEvent>>,
    adversary: Mutex<Option<Box<dyn Adversary>>>,
    conn_counter: AtomicU64,
    timeout: Duration,
}

/// Deterministic in-process carrier. All frames funnel through
/// [`SimInner::forward`], which records the transcript and applies the
/// adversary hook.
#[derive(Clone)]
pub struct SimNet {
    inner: Arc<SimInner>,
}

impl SimNet {
    pub fn new() -> Self {
        Self::with_timeout(DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        SimNet {
            inner: Arc::new(SimInner {
                listeners: Mutex::new(HashMap::new()),
                pending: Mutex::new(HashMap::new()),
                events: Mutex::new(Vec::new()),
                adversary: Mutex::new(None),
                conn_counter: AtomicU64::new(1),
                timeout,
            }),
        }
    }

    pub fn set_adversary(&self, adversary: Option<Box<dyn Adversary>>) {
        *self.inner.adversary.lock().unwrap() = adversary;
    }

    pub fn events(&self) -> Vec<NetEvent> {
        self.inner.events.lock().unwrap().clone()
    }

    /// Ends the run: every listener's accept call returns `Closed`, so
    /// actor serve loops wind down instead of waiting out their timeout.
    pub fn shutdown(&self) {
        for lane in self.inner.listeners.lock().unwrap().values() {
            lane.close();
        }
    }
}

impl Default for SimNet {
    fn default() -> Self {
        Self::new()
    }
}

impl SimInner {
    fn record(&self, ev: NetEvent) {
        self.events.lock().unwrap().push(ev);
    }

    fn forward(&self, st: &mut SimConnState, to_lane: &Arc<Lane>, frame: &[u8]) -> Result<(), NetError> {
        let seq = st.seq;
        st.seq += 1;
        let action = {
            let mut adv = self.adversary.lock().unwrap();
            match adv.as_mut() {
                Some(a) => a.on_frame(&st.link, seq, frame),
                None => FrameAction::Deliver(frame.to_vec()),
            }
        };
        let mut deliveries: Vec<Vec<u8>> = Vec::new();
        match action {
            FrameAction::Deliver(f) => deliveries.push(f),
            FrameAction::Drop => {}
            FrameAction::Inject { first, extra } => {
                deliveries.push(first);
                deliveries.extend(extra);
            }
        }
        // The transcript records what was actually put on the wire.
        let mut extra_seq = seq;
        for (i, f) in deliveries.iter().enumerate() {
            if i > 0 {
                st.seq += 1;
                extra_seq = st.seq - 1;
            }
            self.record(NetEvent {
                kind: EventKind::Frame,
                conn_id: st.link.conn_id,
                seq: if i == 0 { seq } else { extra_seq },
                actor: st.link.from.clone(),
                label: String::new(),
                tag: frame_tag(f),
                digest: crate::crypto::sha256(f),
            });
            to_lane.push(f.clone())?;
        }
        if deliveries.is_empty() {
            self.record(NetEvent {
                kind: EventKind::Frame,
                conn_id: st.link.conn_id,
                seq,
                actor: st.link.from.clone(),
                label: "dropped".into(),
                tag: frame_tag(frame),
                digest: crate::crypto::sha256(frame),
            });
        }
        Ok(())
    }
}

/// Switch-attached endpoint: sends pass through the switch.
pub struct SimConn {
    inner: Arc<SimInner>,
    state: Mutex<SimConnState>,
    tx: Arc<Lane>,
    rx: Arc<Lane>,
}

impl Conn for SimConn {
    fn send(&self, frame: &[u8]) -> Result<(), NetError> {
        if frame.len() > MAX_FRAME_LEN {
            return Err(NetError::FrameTooLarge(frame.len()));
        }
        let mut st = self.state.lock().unwrap();
        self.inner.forward(&mut st, &self.tx, frame)
    }

    fn recv(&self) -> Result<Vec<u8>, NetError> {
        self.rx.pop(self.inner.timeout)
    }

    fn close(&self) {
        self.tx.close();
    }
}

impl Drop for SimConn {
    fn drop(&mut self) {
        self.tx.close();
    }
}

struct SimListener {
    inner: Arc<SimInner>,
    queue: Arc<Lane>,
}

impl Listener for SimListener {
    fn accept(&self) -> Result<BoxConn, NetError> {
        // The lane carries 8-byte conn ids; the endpoint waits in `pending`.
        let id_bytes = self.queue.pop(Duration::from_secs(3600))?;
        let id = u64::from_be_bytes(
            id_bytes
                .as_slice()
                .try_into()
                .map_err(|_| NetError::Io("malformed accept handoff".into()))?,
        );
        let conn = self
            .inner
            .pending
            .lock()
            .unwrap()
            .remove(&id)
            .ok_or_else(|| NetError::Io("lost accept handoff".into()))?;
        Ok(Box::new(conn))
    }
}

impl Net for SimNet {
    fn dial(&self, from: &str, to: &str) -> Result<BoxConn, NetError> {
        let listener = {
            let listeners = self.inner.listeners.lock().unwrap();
            listeners
                .get(to)
                .cloned()
                .ok_or_else(|| NetError::Refused(to.to_string()))?
        };
        let conn_id = self.inner.conn_counter.fetch_add(1, Ordering::SeqCst);
        // Both endpoints send through the switch, so the adversary sees
        // both directions. lane_ab carries dialer→acceptor frames.
        let lane_ab = Arc::new(Lane::new());
        let lane_ba = Arc::new(Lane::new());
        let dialer = SimConn {
            inner: self.inner.clone(),
            state: Mutex::new(SimConnState {
                link: LinkInfo {
                    conn_id,
                    from: from.to_string(),
                    to: to.to_string(),
                },
                seq: 1,
            }),
            tx: lane_ab.clone(),
            rx: lane_ba.clone(),
        };
        let acceptor = SimConn {
            inner: self.inner.clone(),
            state: Mutex::new(SimConnState {
                link: LinkInfo {
                    conn_id,
                    from: to.to_string(),
                    to: from.to_string(),
                },
                seq: 1,
            }),
            tx: lane_ba,
            rx: lane_ab,
        };
        self.inner.record(NetEvent {
            kind: EventKind::Open,
            conn_id,
            seq: 0,
            actor: from.to_string(),
            label: to.to_string(),
            tag: None,
            digest: crate::crypto::sha256(to.as_bytes()),
        });
        self.inner.pending.lock().unwrap().insert(conn_id, acceptor);
        listener.push(conn_id.to_be_bytes().to_vec())?;
        Ok(Box::new(dialer))
    }

    fn listen(&self, name: &str) -> Result<Box<dyn Listener>, NetError> {
        let lane = Arc::new(Lane::new());
        let mut listeners = self.inner.listeners.lock().unwrap();
        if listeners.contains_key(name) {
            return Err(NetError::Io(format!("{name:?} already listening")));
        }
        listeners.insert(name.to_string(), lane.clone());
        Ok(Box::new(SimListener {
            inner: self.inner.clone(),
            queue: lane,
        }))
    }
}

// ---------------------------------------------------------------------------
// TCP carrier

fn write_frame(stream: &mut TcpStream, frame: &[u8]) -> Result<(), NetError> {
    if frame.len() > MAX_FRAME_LEN {
        return Err(NetError::FrameTooLarge(frame.len()));
    }
    let len = (frame.len() as u32).to_be_bytes();
    stream.write_all(&len)?;
    stream.write_all(frame)?;
    Ok(())
}

fn read_frame(stream: &mut TcpStream) -> Result<Vec<u8>, NetError> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > MAX_FRAME_LEN {
        return Err(NetError::FrameTooLarge(len));
    }
    let mut frame = vec![0u8; len];
    stream.read_exact(&mut frame)?;
    Ok(frame)
}

/// Framed TCP connection; reads and writes are internally locked so one
/// reader and one writer may share it.
pub struct TcpConn {
    read: Mutex<TcpStream>,
    write: Mutex<TcpStream>,
}

impl TcpConn {
    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, NetError> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let clone = stream.try_clone()?;
        Ok(TcpConn {
            read: Mutex::new(stream),
            write: Mutex::new(clone),
        })
    }
}

impl Conn for TcpConn {
    fn send(&self, frame: &[u8]) -> Result<(), NetError> {
        write_frame(&mut self.write.lock().unwrap(), frame)
    }

    fn recv(&self) -> Result<Vec<u8>, NetError> {
        read_frame(&mut self.read.lock().unwrap())
    }

    fn close(&self) {
        let _ = self.write.lock().unwrap().shutdown(std::net::Shutdown::Write);
    }
}

/// Name → address carrier over local sockets.
pub struct TcpNet {
    addresses: Mutex<HashMap<String, SocketAddr>>,
    /// Sockets bound ahead of time (usually to port 0); `listen` hands
    /// them out instead of binding fresh.
    bound: Mutex<HashMap<String, TcpListener>>,
    timeout: Duration,
}

impl TcpNet {
    pub fn new(addresses: HashMap<String, SocketAddr>) -> Self {
        TcpNet {
            addresses: Mutex::new(addresses),
            bound: Mutex::new(HashMap::new()),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn add(&self, name: &str, addr: SocketAddr) {
        self.addresses.lock().unwrap().insert(name.to_string(), addr);
    }

    pub fn address(&self, name: &str) -> Option<SocketAddr> {
        self.addresses.lock().unwrap().get(name).copied()
    }

    /// Binds `name` to an OS-assigned loopback port right now, so the
    /// caller can publish the concrete address before anyone listens.
    pub fn bind_ephemeral(&self, name: &str) -> Result<SocketAddr, NetError> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        self.addresses.lock().unwrap().insert(name.to_string(), addr);
        self.bound.lock().unwrap().insert(name.to_string(), listener);
        Ok(addr)
    }
}

struct TcpAcceptor {
    listener: TcpListener,
    timeout: Duration,
}

impl Listener for TcpAcceptor {
    fn accept(&self) -> Result<BoxConn, NetError> {
        let (stream, _) = self.listener.accept()?;
        Ok(Box::new(TcpConn::from_stream(stream, self.timeout)?))
    }
}

impl Net for TcpNet {
    fn dial(&self, _from: &str, to: &str) -> Result<BoxConn, NetError> {
        let addr = {
            let map = self.addresses.lock().unwrap();
            *map.get(to).ok_or_else(|| NetError::Refused(to.to_string()))?
        };
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        Ok(Box::new(TcpConn::from_stream(stream, self.timeout)?))
    }

    fn listen(&self, name: &str) -> Result<Box<dyn Listener>, NetError> {
        let listener = match self.bound.lock().unwrap().remove(name) {
            Some(ready) => ready,
            None => {
                let addr = {
                    let map = self.addresses.lock().unwrap();
                    *map.get(name).ok_or_else(|| NetError::Refused(name.to_string()))?
                };
                TcpListener::bind(addr)?
            }
        };
        Ok(Box::new(TcpAcceptor {
            listener,
            timeout: self.timeout,
        }))
    }
}
