//! Node-to-node messaging.
//!
//! A run has `N` workers (endpoints `0..N`) and one collector (endpoint
//! `N`) that receives final layers and metrics. Every endpoint owns a
//! mailbox: frames arrive in any interleaving across senders (per-sender
//! order is preserved) and are parked under `(type, chapter, index)` until
//! the training loop asks for them. Both backends carry the same encoded
//! frames, so checksums and byte counts behave identically.

pub mod inproc;
pub mod tcp;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ffpipe_core::wire::{Control, ControlKind, Frame, LayerSnapshot, Message, MsgType, NegLabels};
use ffpipe_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PipeError, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(PipeError::Config(format!("unknown transport `{other}` (inproc or tcp)"))),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::InProcess => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

/// Random delay added before each send, for stress tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub seed: u64,
    pub max: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportOptions {
    /// How long a blocking receive waits before reporting a stall.
    pub timeout: Duration,
    pub jitter: Option<Jitter>,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            timeout: DEFAULT_TIMEOUT,
            jitter: None,
        }
    }
}

/// Frames and bytes put on the wire, per message type. Self-addressed
/// messages never touch the wire and are not counted.
#[derive(Debug, Default)]
pub struct WireStats {
    frames: [AtomicU64; 5],
    bytes: [AtomicU64; 5],
}

impl WireStats {
    fn record(&self, t: MsgType, len: usize) {
        self.frames[t as usize].fetch_add(1, Ordering::Relaxed);
        self.bytes[t as usize].fetch_add(len as u64, Ordering::Relaxed);
    }

    pub fn frames(&self, t: MsgType) -> u64 {
        self.frames[t as usize].load(Ordering::Relaxed)
    }

    pub fn bytes(&self, t: MsgType) -> u64 {
        self.bytes[t as usize].load(Ordering::Relaxed)
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().map(|b| b.load(Ordering::Relaxed)).sum()
    }
}

/// What a backend hands to an endpoint's inbox.
#[derive(Debug)]
pub enum Delivery {
    Frame { from: usize, bytes: Vec<u8> },
    /// The connection from `from` failed.
    Broken { from: usize, reason: String },
}

/// One direction of a connection to a peer.
pub trait Link: Send {
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()>;
}

type Key = (MsgType, u16, u16);

pub struct Endpoint {
    node: usize,
    links: Vec<Option<Box<dyn Link>>>,
    inbox: Receiver<Delivery>,
    self_tx: Sender<Delivery>,
    parked: HashMap<Key, (usize, Frame)>,
    events: VecDeque<(usize, Frame)>,
    stats: Arc<WireStats>,
    opts: TransportOptions,
    jitter: Option<(ChaCha8Rng, Duration)>,
}

impl Endpoint {
    pub(crate) fn new(
        node: usize,
        links: Vec<Option<Box<dyn Link>>>,
        inbox: Receiver<Delivery>,
        self_tx: Sender<Delivery>,
        stats: Arc<WireStats>,
        opts: TransportOptions,
    ) -> Self {
        let jitter = opts
            .jitter
            .map(|j| (ChaCha8Rng::seed_from_u64(j.seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), j.max));
        Endpoint {
            node,
            links,
            inbox,
            self_tx,
            parked: HashMap::new(),
            events: VecDeque::new(),
            stats,
            opts,
            jitter,
        }
    }

    pub fn node(&self) -> usize {
        self.node
    }

    /// Number of endpoints in the run, collector included.
    pub fn endpoints(&self) -> usize {
        self.links.len()
    }

    pub fn stats(&self) -> &Arc<WireStats> {
        &self.stats
    }

    pub fn timeout(&self) -> Duration {
        self.opts.timeout
    }

    fn transport_err(&self, msg: impl Into<String>) -> PipeError {
        PipeError::Transport {
            node: self.node,
            msg: msg.into(),
        }
    }

    fn protocol_err(&self, msg: impl Into<String>) -> PipeError {
        PipeError::Protocol {
            node: self.node,
            msg: msg.into(),
        }
    }

    /// Sends already-encoded bytes. Used directly only for fault injection.
    pub fn send_raw(&mut self, to: usize, bytes: Vec<u8>) -> Result<()> {
        if to == self.node {
            return self
                .self_tx
                .send(Delivery::Frame { from: to, bytes })
                .map_err(|_| self.transport_err("own inbox closed"));
        }
        if let Some((rng, max)) = &mut self.jitter {
            let pause = rng.random_range(0..=max.as_micros() as u64);
            std::thread::sleep(Duration::from_micros(pause));
        }
        if let Ok((t, _)) = Frame::parse_header(&bytes) {
            self.stats.record(t, bytes.len());
        }
        let node = self.node;
        let link = self
            .links
            .get_mut(to)
            .and_then(|l| l.as_mut())
            .ok_or_else(|| PipeError::Transport {
                node,
                msg: format!("no link to node {to}"),
            })?;
        link.send(&bytes).map_err(|e| PipeError::Transport {
            node,
            msg: format!("sending to node {to}: {e}"),
        })
    }

    pub fn send<R: Real>(&mut self, to: usize, msg: &Message<R>) -> Result<()> {
        self.send_raw(to, msg.encode()?)
    }

    /// Tells every other endpoint to stop; errors are ignored because the
    /// run is failing anyway.
    pub fn broadcast_abort(&mut self, reason: &str) {
        let msg = Message::<f32>::Control(Control {
            kind: ControlKind::Abort,
            node: self.node as u16,
            text: reason.to_string(),
        });
        if let Ok(bytes) = msg.encode() {
            for to in 0..self.links.len() {
                if to != self.node {
                    let _ = self.send_raw(to, bytes.clone());
                }
            }
        }
    }

    /// Moves one delivery into the mailbox; `Ok(false)` when the deadline
    /// passed first.
    fn pump(&mut self, deadline: Instant) -> Result<bool> {
        let wait = deadline.saturating_duration_since(Instant::now());
        let delivery = match self.inbox.recv_timeout(wait) {
            Ok(d) => d,
            Err(RecvTimeoutError::Timeout) => return Ok(false),
            Err(RecvTimeoutError::Disconnected) => return Err(self.transport_err("inbox disconnected")),
        };
        let (from, bytes) = match delivery {
            Delivery::Frame { from, bytes } => (from, bytes),
            Delivery::Broken { from, reason } => {
                return Err(self.transport_err(format!("connection from node {from} failed: {reason}")))
            }
        };
        let frame = Frame::decode(&bytes).map_err(|e| self.protocol_err(format!("bad frame from node {from}: {e}")))?;
        let key = match frame.msg_type {
            MsgType::LayerSnapshot if frame.payload.len() >= 4 => {
                let p = &frame.payload;
                let layer = u16::from_le_bytes([p[0], p[1]]);
                let chapter = u16::from_le_bytes([p[2], p[3]]);
                Some((MsgType::LayerSnapshot, chapter, layer))
            }
            MsgType::NegLabels if frame.payload.len() >= 2 => {
                let chapter = u16::from_le_bytes([frame.payload[0], frame.payload[1]]);
                Some((MsgType::NegLabels, chapter, 0))
            }
            MsgType::LayerSnapshot | MsgType::NegLabels => {
                return Err(self.protocol_err(format!("short payload from node {from}")));
            }
            MsgType::Control => {
                let c = Control::decode(&frame.payload).map_err(|e| self.protocol_err(e.to_string()))?;
                if c.kind == ControlKind::Abort {
                    return Err(PipeError::Aborted {
                        node: self.node,
                        from: c.node as usize,
                        reason: c.text,
                    });
                }
                None
            }
            MsgType::MetricsSample => None,
        };
        match key {
            Some(k) => {
                if self.parked.insert(k, (from, frame)).is_some() {
                    return Err(self.protocol_err(format!("duplicate publication {k:?} from node {from}")));
                }
            }
            None => self.events.push_back((from, frame)),
        }
        Ok(true)
    }

    fn wait_key(&mut self, key: Key, what: impl Fn() -> String) -> Result<(usize, Frame)> {
        let start = Instant::now();
        let deadline = start + self.opts.timeout;
        loop {
            if let Some(hit) = self.parked.remove(&key) {
                return Ok(hit);
            }
            if !self.pump(deadline)? {
                return Err(PipeError::Timeout {
                    node: self.node,
                    secs: start.elapsed().as_secs_f64(),
                    what: what(),
                });
            }
        }
    }

    /// Blocks until layer `layer` as published after `chapter` arrives.
    pub fn get_layer<R: Real>(&mut self, chapter: u32, layer: usize, from: usize) -> Result<LayerSnapshot<R>> {
        let (sender, frame) = self.wait_key((MsgType::LayerSnapshot, chapter as u16, layer as u16), || {
            format!("layer {layer} of chapter {chapter} from node {from}")
        })?;
        match Message::<R>::from_frame(&frame)? {
            Message::Layer(s) => Ok(s),
            _ => Err(self.protocol_err(format!("node {sender} sent a non-layer frame under a layer key"))),
        }
    }

    /// Blocks until negative labels for `chapter` arrive.
    pub fn get_negatives(&mut self, chapter: u32, from: usize) -> Result<NegLabels> {
        let (_, frame) = self.wait_key((MsgType::NegLabels, chapter as u16, 0), || {
            format!("negative labels for chapter {chapter} from node {from}")
        })?;
        Ok(NegLabels::decode(&frame.payload)?)
    }

    /// Next metrics, control or layer message in arrival order. Layers are
    /// only returned here when nobody waits for them by key, as on the
    /// collector.
    pub fn next_message<R: Real>(&mut self) -> Result<(usize, Message<R>)> {
        let start = Instant::now();
        let deadline = start + self.opts.timeout;
        loop {
            if let Some((from, frame)) = self.events.pop_front() {
                return Ok((from, Message::from_frame(&frame)?));
            }
            if let Some(&k) = self.parked.keys().min() {
                let (from, frame) = self.parked.remove(&k).expect("key just seen");
                return Ok((from, Message::from_frame(&frame)?));
            }
            if !self.pump(deadline)? {
                return Err(PipeError::Timeout {
                    node: self.node,
                    secs: start.elapsed().as_secs_f64(),
                    what: "any message from the workers".into(),
                });
            }
        }
    }
}
