//! Deterministic discrete-event network: partial synchrony with a GST, a
//! per-message Δ bound afterwards, targeted suppression windows, and per-node
//! memory budgets.

mod memory;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::dag::{put_bytes, put_u32, put_u64, ByteSink, Digest, NodeId};

pub use memory::{Exhausted, MemoryAccount, MemoryMeter, MsgClass};

/// Simulated milliseconds.
pub type Millis = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    pub now: Millis,
    pub gst: Millis,
    pub delta: Millis,
}

/// What the trace hash sees of a message.
pub trait Traced {
    fn trace_kind(&self) -> &'static str;
    /// Short identifying bytes (a digest, an instance id, ...).
    fn trace_id(&self, sink: &mut Sha256);
}

#[derive(Clone, Debug)]
pub struct Envelope<M> {
    pub from: NodeId,
    pub to: NodeId,
    pub message: M,
    pub class: MsgClass,
    pub send_time: Millis,
    pub deliver_time: Millis,
}

#[derive(Clone, Debug)]
pub enum Event<M, T> {
    Deliver(Envelope<M>),
    Timer { node: NodeId, token: T },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("{0} is exhausted and may not originate DAG messages")]
    SenderExhausted(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    #[error("window must satisfy from < until (got {from}..{until})")]
    Empty { from: Millis, until: Millis },
    #[error("no window {0}")]
    Unknown(usize),
    #[error("window {0} already has an end")]
    AlreadyResolved(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub n: usize,
    pub delta: Millis,
    pub gst: Millis,
    /// Upper bound of the random pre-GST delay, in multiples of Δ.
    pub pre_gst_factor: u64,
    pub seed: u64,
    pub memory_limit: u64,
    pub fallback_reserve: u64,
}

/// Suppresses every delivery into `target` from `from` until the window
/// closes. An open window (`until == None`) holds traffic until resolved.
#[derive(Clone, Debug)]
struct Window<M> {
    target: NodeId,
    from: Millis,
    until: Option<Millis>,
    closed: bool,
    held: Vec<Envelope<M>>,
}

impl<M> Window<M> {
    fn covers(&self, to: NodeId, t: Millis) -> bool {
        !self.closed && to == self.target && t >= self.from && self.until.map_or(true, |u| t < u)
    }
}

enum Slot<M, T> {
    Ev(Event<M, T>),
    Close(usize),
}

struct Scheduled<M, T> {
    time: Millis,
    seq: u64,
    slot: Slot<M, T>,
}

impl<M, T> PartialEq for Scheduled<M, T> {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl<M, T> Eq for Scheduled<M, T> {}
impl<M, T> PartialOrd for Scheduled<M, T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<M, T> Ord for Scheduled<M, T> {
    // min-heap on (time, seq)
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

/// Delivery statistics gathered for the post-run audit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NetStats {
    pub delivered: u64,
    pub held_by_windows: u64,
    /// Envelopes that broke `deliver ≤ max(send, GST_eff) + Δ`.
    pub bound_violations: u64,
    pub rejected_exhausted_sends: u64,
    pub bytes_by_class: [u64; 2],
}

pub struct SimNet<M, T> {
    cfg: NetConfig,
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Scheduled<M, T>>,
    windows: Vec<Window<M>>,
    rng: ChaCha8Rng,
    trace: Sha256,
    trace_log: Option<Vec<String>>,
    meter: MemoryMeter,
    stats: NetStats,
}

impl<M: Clone + Traced, T> SimNet<M, T> {
    pub fn new(cfg: NetConfig) -> Self {
        assert!(cfg.delta > 0, "Δ must be positive");
        let meter = MemoryMeter::new(cfg.n, cfg.memory_limit, cfg.fallback_reserve);
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e65_7477_6f72_6b00),
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            windows: Vec::new(),
            trace: Sha256::new(),
            trace_log: None,
            meter,
            stats: NetStats::default(),
        }
    }

    /// Keep a human-readable line per event, in addition to the hash.
    pub fn record_trace_log(&mut self) {
        self.trace_log = Some(Vec::new());
    }

    pub fn clock(&self) -> SimClock {
        SimClock {
            now: self.now,
            gst: self.cfg.gst,
            delta: self.cfg.delta,
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn meter(&self) -> &MemoryMeter {
        &self.meter
    }

    pub fn meter_mut(&mut self) -> &mut MemoryMeter {
        &mut self.meter
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    /// GST after which the Δ bound must hold: the configured GST pushed past
    /// every suppression window. `None` while some window is still open.
    pub fn effective_gst(&self) -> Option<Millis> {
        let mut g = self.cfg.gst;
        for w in &self.windows {
            g = g.max(w.until?);
        }
        Some(g)
    }

    pub fn add_window(&mut self, target: NodeId, from: Millis, until: Option<Millis>) -> Result<usize, WindowError> {
        if let Some(u) = until {
            if u <= from {
                return Err(WindowError::Empty { from, until: u });
            }
        }
        let id = self.windows.len();
        self.windows.push(Window {
            target,
            from,
            until: None,
            closed: false,
            held: Vec::new(),
        });
        if let Some(u) = until {
            self.resolve_window(id, u)?;
        }
        Ok(id)
    }

    /// Fix the end of an open window. An end already in the past closes it
    /// at the current time.
    pub fn resolve_window(&mut self, id: usize, until: Millis) -> Result<(), WindowError> {
        let w = self.windows.get_mut(id).ok_or(WindowError::Unknown(id))?;
        if w.until.is_some() {
            return Err(WindowError::AlreadyResolved(id));
        }
        let until = until.max(w.from + 1);
        w.until = Some(until);
        let at = until.max(self.now);
        self.push(at, Slot::Close(id));
        Ok(())
    }

    pub fn is_suppressed(&self, node: NodeId, t: Millis) -> bool {
        self.windows.iter().any(|w| w.covers(node, t))
    }

    fn push(&mut self, time: Millis, slot: Slot<M, T>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled { time, seq, slot });
    }

    fn delay(&mut self) -> Millis {
        let (gst, d) = (self.cfg.gst, self.cfg.delta);
        if self.now >= gst {
            self.now + self.rng.gen_range(1..=d)
        } else {
            let pre = self.now + self.rng.gen_range(0..=self.cfg.pre_gst_factor * d);
            // A message sent before GST still lands by GST + Δ.
            pre.min(gst + self.rng.gen_range(1..=d))
        }
    }

    /// Schedule `message`. Self-addressed messages are delivered at `now`
    /// and are never suppressed.
    pub fn send(&mut self, from: NodeId, to: NodeId, message: M, class: MsgClass, bytes: u64) -> Result<Millis, SendError> {
        if to.index() >= self.cfg.n {
            return Err(SendError::UnknownNode(to));
        }
        if class == MsgClass::Dag && self.meter.account(from).is_exhausted() {
            self.stats.rejected_exhausted_sends += 1;
            return Err(SendError::SenderExhausted(from));
        }
        self.stats.bytes_by_class[class as usize] += bytes;
        let deliver_time = if from == to { self.now } else { self.delay() };
        let env = Envelope {
            from,
            to,
            message,
            class,
            send_time: self.now,
            deliver_time,
        };
        if from != to {
            if let Some(w) = self.windows.iter_mut().find(|w| w.covers(to, deliver_time)) {
                w.held.push(env);
                self.stats.held_by_windows += 1;
                return Ok(deliver_time);
            }
        }
        self.push(deliver_time, Slot::Ev(Event::Deliver(env)));
        Ok(deliver_time)
    }

    pub fn set_timer(&mut self, node: NodeId, at: Millis, token: T) {
        self.push(at.max(self.now), Slot::Ev(Event::Timer { node, token }));
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.queue.peek().map(|s| s.time)
    }

    /// Advance to the next event time and return everything due then, in
    /// `(deliver_time, sequence)` order. `None` once the queue is empty.
    pub fn step(&mut self) -> Option<(Millis, Vec<Event<M, T>>)> {
        let t = self.queue.peek()?.time;
        self.now = t;
        let mut out = Vec::new();
        while self.queue.peek().is_some_and(|s| s.time == t) {
            let s = self.queue.pop().expect("peeked");
            match s.slot {
                Slot::Close(id) => self.close_window(id),
                Slot::Ev(ev) => {
                    self.observe(&ev);
                    out.push(ev);
                }
            }
        }
        Some((t, out))
    }

    fn close_window(&mut self, id: usize) {
        let w = &mut self.windows[id];
        w.closed = true;
        let held = std::mem::take(&mut w.held);
        let base = w.until.expect("closed windows are resolved").max(self.now);
        for mut env in held {
            env.deliver_time = base + self.rng.gen_range(0..=self.cfg.delta);
            // another window on the same node may still be running
            if let Some(w2) = self.windows.iter_mut().find(|w| w.covers(env.to, env.deliver_time)) {
                w2.held.push(env);
                continue;
            }
            let at = env.deliver_time;
            self.push(at, Slot::Ev(Event::Deliver(env)));
        }
    }

    fn observe(&mut self, ev: &Event<M, T>) {
        match ev {
            Event::Deliver(env) => {
                self.stats.delivered += 1;
                if let Some(g) = self.effective_gst() {
                    if env.send_time >= g && env.deliver_time > env.send_time.max(g) + self.cfg.delta {
                        self.stats.bound_violations += 1;
                    }
                }
                put_u64(&mut self.trace, env.deliver_time);
                put_bytes(&mut self.trace, env.message.trace_kind().as_bytes());
                put_u32(&mut self.trace, env.from.0);
                put_u32(&mut self.trace, env.to.0);
                if let Some(log) = &mut self.trace_log {
                    let mut h = Sha256::new();
                    env.message.trace_id(&mut h);
                    let d = Digest(h.finalize().into());
                    log.push(format!(
                        "{} {} {} {} {}",
                        env.deliver_time,
                        env.message.trace_kind(),
                        env.from.0,
                        env.to.0,
                        d
                    ));
                }
                env.message.trace_id(&mut self.trace);
            }
            Event::Timer { node, .. } => {
                put_u64(&mut self.trace, self.now);
                put_bytes(&mut self.trace, b"timer");
                put_u32(&mut self.trace, node.0);
                if let Some(log) = &mut self.trace_log {
                    log.push(format!("{} timer {} {} -", self.now, node.0, node.0));
                }
            }
        }
    }

    /// Fold an out-of-band observation (e.g. a commit) into the trace.
    pub fn trace_note(&mut self, bytes: &[u8]) {
        self.trace.put(bytes);
    }

    pub fn trace_hash(&self) -> Digest {
        Digest(self.trace.clone().finalize().into())
    }

    pub fn trace_log(&self) -> Option<&[String]> {
        self.trace_log.as_deref()
    }
}
