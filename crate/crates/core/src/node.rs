//! Per-replica plumbing shared by both engines: the handler context, timers,
//! metric events, transaction intake, memory-charged DAG admission, ordering
//! and missing-vertex synchronization.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Behavior;
use crate::dag::{Committee, DagStore, Digest, InsertError, Inserted, KeyRegistry, NodeId, Round, SigningKey, VertexPtr, VertexRef};
use crate::lifefin::{Fallback, TriggerReason};
use crate::simnet::{MemoryAccount, Millis, MsgClass};
use crate::wire::Message;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    To(NodeId),
    /// Every node, the sender included.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timer {
    /// Leader wait for a round expired.
    Leader(Round),
    /// Re-check the stuck condition of a fallback view.
    Stuck(u64),
    /// Retry outstanding vertex fetches.
    Sync,
    /// Minimum spacing between own vertices elapsed.
    Pace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitKind {
    Direct,
    Indirect,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricEvent {
    /// This node built (and began disseminating) a vertex.
    VertexCreated { vertex: VertexRef, bytes: u64 },
    /// A vertex entered the local store; `fallback` if it came through the
    /// fallback path and is charged to the fallback reserve.
    VertexAccepted { vertex: VertexRef, bytes: u64, fallback: bool },
    VertexOrdered { vertex: VertexRef, bytes: u64, fallback: bool },
    LeaderCommitted {
        leader: VertexRef,
        kind: CommitKind,
        /// Was the leader's whole history stored when it was ordered?
        history_complete: bool,
    },
    /// First-message support behind a direct commit.
    DirectCommitJustified { leader: VertexRef, supporters: usize },
    Exhausted,
    FallbackTriggered { view: u64, reason: TriggerReason },
    AcsDecided {
        view: u64,
        blocks: Vec<(NodeId, VertexRef)>,
        bytes_used: u64,
    },
    FallbackLeader { round: Round, creator: NodeId, predefined: bool },
    FallbackFinalized { view: u64, r_fb: Round },
}

#[derive(Default, Debug)]
pub struct Outbox {
    pub sends: Vec<(Dest, Message)>,
    pub timers: Vec<(Millis, Timer)>,
    pub events: Vec<MetricEvent>,
}

/// Everything a handler may touch besides its own state.
pub struct Ctx<'a> {
    pub now: Millis,
    pub mem: &'a mut MemoryAccount,
    pub out: &'a mut Outbox,
}

impl Ctx<'_> {
    pub fn send(&mut self, to: NodeId, m: Message) {
        self.out.sends.push((Dest::To(to), m));
    }

    pub fn broadcast(&mut self, m: Message) {
        self.out.sends.push((Dest::All, m));
    }

    pub fn timer(&mut self, at: Millis, t: Timer) {
        self.out.timers.push((at, t));
    }

    pub fn emit(&mut self, e: MetricEvent) {
        self.out.events.push(e);
    }
}

/// What the harness drives.
pub trait Engine: Send {
    fn start(&mut self, ctx: &mut Ctx<'_>);
    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message);
    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer);
    fn core(&self) -> &Core;
    /// Round of this node's latest own vertex (or the round it resumes at).
    fn current_round(&self) -> Round;
}

/// Round-robin leaders, with the per-round reassignments made by finalized
/// fallbacks.
#[derive(Clone, Debug)]
pub struct Leaders {
    committee: Committee,
    overrides: BTreeMap<Round, NodeId>,
}

impl Leaders {
    pub fn new(committee: Committee) -> Self {
        Self {
            committee,
            overrides: BTreeMap::new(),
        }
    }

    pub fn of(&self, r: Round) -> NodeId {
        self.overrides.get(&r).copied().unwrap_or_else(|| self.committee.leader(r))
    }

    pub fn predefined(&self, r: Round) -> NodeId {
        self.committee.leader(r)
    }

    pub fn reassign(&mut self, r: Round, to: NodeId) {
        self.overrides.insert(r, to);
    }
}

/// Client load for one replica: `tx_rate / n` transactions per second of
/// `tx_size` opaque bytes each.
#[derive(Clone, Debug)]
pub struct TxSource {
    tx_rate: u64,
    n: u64,
    tx_size: usize,
    max_batch: u64,
    last: Millis,
    carry: u64,
    backlog: u64,
    rng: ChaCha8Rng,
}

impl TxSource {
    pub fn new(tx_rate: u64, n: usize, tx_size: usize, max_batch: u64, seed: u64, me: NodeId) -> Self {
        Self {
            tx_rate,
            n: n as u64,
            tx_size,
            max_batch,
            last: 0,
            carry: 0,
            backlog: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (0x7478_0000 + me.0 as u64)),
        }
    }

    fn accrue(&mut self, now: Millis) {
        let units = self.carry + now.saturating_sub(self.last) * self.tx_rate;
        let per_tx = 1000 * self.n;
        self.backlog += units / per_tx;
        self.carry = units % per_tx;
        self.last = now.max(self.last);
    }

    /// Pending transactions, without taking them.
    pub fn pending(&mut self, now: Millis) -> u64 {
        self.accrue(now);
        self.backlog
    }

    /// Take up to one batch worth of payload.
    pub fn take(&mut self, now: Millis) -> Vec<u8> {
        self.accrue(now);
        let k = self.backlog.min(self.max_batch);
        self.backlog -= k;
        let mut buf = vec![0u8; k as usize * self.tx_size];
        self.rng.fill_bytes(&mut buf);
        buf
    }
}

/// Outstanding fetches of missing vertices. A vertex is handed back for
/// insertion once `need` distinct peers have supplied it.
#[derive(Debug)]
pub struct Fetcher {
    need: usize,
    wanted: BTreeMap<Digest, Want>,
    offers: HashMap<Digest, (VertexPtr, BTreeSet<NodeId>)>,
    armed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Want {
    pub vref: VertexRef,
    pub fallback: bool,
    pub hint: Option<NodeId>,
    pub attempts: u32,
}

impl Fetcher {
    pub fn new(need: usize) -> Self {
        Self {
            need: need.max(1),
            wanted: BTreeMap::new(),
            offers: HashMap::new(),
            armed: false,
        }
    }

    pub fn want(&mut self, vref: VertexRef, fallback: bool, hint: Option<NodeId>) -> bool {
        match self.wanted.get_mut(&vref.digest) {
            Some(w) => {
                w.fallback |= fallback;
                false
            }
            None => {
                self.wanted.insert(
                    vref.digest,
                    Want {
                        vref,
                        fallback,
                        hint,
                        attempts: 0,
                    },
                );
                true
            }
        }
    }

    pub fn outstanding(&self) -> usize {
        self.wanted.len()
    }

    pub fn is_wanted(&self, d: &Digest) -> bool {
        self.wanted.contains_key(d)
    }

    /// A peer supplied `v`. Returns it once sufficiently confirmed.
    pub fn offer(&mut self, from: NodeId, v: VertexPtr) -> Option<VertexPtr> {
        let d = v.digest();
        let e = self.offers.entry(d).or_insert_with(|| (v, BTreeSet::new()));
        e.1.insert(from);
        if e.1.len() >= self.need {
            let (v, _) = self.offers.remove(&d).expect("present");
            self.wanted.remove(&d);
            Some(v)
        } else {
            None
        }
    }

    /// Abandon every outstanding fetch.
    pub fn clear(&mut self) {
        self.wanted.clear();
        self.offers.clear();
    }

    pub fn satisfied(&mut self, d: &Digest) {
        self.wanted.remove(d);
        self.offers.remove(d);
    }
}

/// Budget of vertices in one sync reply.
pub const SYNC_REPLY_CAP: usize = 400;
/// Rounds of ancestry requested below the lowest missing vertex.
pub const SYNC_DEPTH: Round = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admit {
    Stored,
    Duplicate,
    /// Rejected: out of memory.
    Dropped,
    Invalid,
    /// A second version of an occupied slot.
    Conflict,
}

/// State both engines share.
pub struct Core {
    pub me: NodeId,
    pub committee: Committee,
    pub registry: Arc<KeyRegistry>,
    pub key: SigningKey,
    pub store: DagStore,
    pub ordered: Vec<VertexRef>,
    pub fetcher: Fetcher,
    pub fb: Fallback,
    pub tx: TxSource,
    pub behavior: Behavior,
    pub sync_delay: Millis,
    pub sync_retry: Millis,
    /// Own vertices by round.
    pub own: BTreeMap<Round, VertexPtr>,
    /// Vertices fetched for the fallback, and the budget each was charged to.
    fb_fetched: HashMap<Digest, MsgClass>,
    exhausted_reported: bool,
}

impl Core {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        me: NodeId,
        registry: Arc<KeyRegistry>,
        fetch_confirmations: usize,
        fb: Fallback,
        tx: TxSource,
        behavior: Behavior,
        sync_delay: Millis,
        sync_retry: Millis,
    ) -> Self {
        let committee = registry.committee();
        let store = DagStore::with_genesis(committee);
        let mut own = BTreeMap::new();
        own.insert(1, store.slot(1, me).expect("genesis").clone());
        Self {
            me,
            committee,
            key: registry.signing_key(me),
            registry,
            store,
            ordered: Vec::new(),
            fetcher: Fetcher::new(fetch_confirmations),
            fb,
            tx,
            behavior,
            sync_delay,
            sync_retry,
            own,
            fb_fetched: HashMap::new(),
            exhausted_reported: false,
        }
    }

    pub fn latest_own(&self) -> VertexPtr {
        self.own.values().next_back().expect("genesis").clone()
    }

    pub fn is_exhausted(&self, ctx: &Ctx<'_>) -> bool {
        ctx.mem.is_exhausted()
    }

    fn report_exhausted(&mut self, ctx: &mut Ctx<'_>) {
        if !self.exhausted_reported {
            self.exhausted_reported = true;
            ctx.emit(MetricEvent::Exhausted);
        }
    }

    /// Insert into the store, charging memory. `evidence` admits a second
    /// version of an occupied slot; `fallback` charges the fallback reserve.
    pub fn admit(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr, evidence: bool, fallback: bool) -> (Admit, Inserted) {
        if self.store.contains(&v.digest()) {
            return (Admit::Duplicate, Inserted::default());
        }
        let bytes = v.size() as u64;
        // fallback fetches use spare DAG budget first, the reserve only when
        // the DAG budget is spent
        let class = if fallback && !ctx.mem.fits(bytes, MsgClass::Dag) { MsgClass::Fallback } else { MsgClass::Dag };
        if ctx.mem.charge(bytes, class).is_err() {
            if !fallback {
                self.report_exhausted(ctx);
            }
            return (Admit::Dropped, Inserted::default());
        }
        if ctx.mem.is_exhausted() {
            self.report_exhausted(ctx);
        }
        let res = if evidence {
            self.store.insert_evidence(v.clone())
        } else {
            self.store.insert_vertex(v.clone())
        };
        match res {
            Ok(ins) => {
                if fallback {
                    self.fb_fetched.insert(v.digest(), class);
                    self.fb.note_fallback_bytes(bytes);
                }
                self.fetcher.satisfied(&v.digest());
                ctx.emit(MetricEvent::VertexAccepted {
                    vertex: v.reference(),
                    bytes,
                    fallback,
                });
                (Admit::Stored, ins)
            }
            Err(e) => {
                ctx.mem.refund(bytes, class);
                match e {
                    InsertError::Equivocation { .. } => (Admit::Conflict, Inserted::default()),
                    _ => (Admit::Invalid, Inserted::default()),
                }
            }
        }
    }

    /// Order the unordered history of `leader`, history first. Returns the
    /// number of vertices ordered, or `None` if history is incomplete.
    pub fn order_history(&mut self, ctx: &mut Ctx<'_>, leader: &VertexRef) -> Option<usize> {
        let hist = self.store.causal_history(&leader.digest).ok()?;
        // causal_history sorts by round, so the leader (highest round) is last
        for v in &hist {
            let d = v.digest();
            if let Some(bytes) = self.store.mark_ordered(&d) {
                let class = self.fb_fetched.remove(&d);
                let fallback = class.is_some();
                let class = class.unwrap_or(MsgClass::Dag);
                ctx.mem.refund(bytes as u64, class);
                self.ordered.push(v.reference());
                ctx.emit(MetricEvent::VertexOrdered {
                    vertex: v.reference(),
                    bytes: bytes as u64,
                    fallback,
                });
            }
        }
        Some(hist.len())
    }

    /// Queue fetches for `refs`; arms the retry timer if needed.
    pub fn want(&mut self, ctx: &mut Ctx<'_>, refs: &[VertexRef], fallback: bool, hint: Option<NodeId>) {
        let mut any = false;
        for r in refs {
            if !self.store.contains(&r.digest) {
                any |= self.fetcher.want(*r, fallback, hint);
            }
        }
        if any && !self.fetcher.armed {
            self.fetcher.armed = true;
            let delay = if fallback { 0 } else { self.sync_delay };
            ctx.timer(ctx.now + delay, Timer::Sync);
        }
    }

    /// Sync timer fired: (re)issue requests for what is still missing.
    pub fn on_sync_timer(&mut self, ctx: &mut Ctx<'_>) {
        self.fetcher.armed = false;
        let store = &self.store;
        self.fetcher.wanted.retain(|d, _| !store.contains(d));
        if self.fetcher.wanted.is_empty() {
            return;
        }
        // group by (target, class)
        let mut batches: BTreeMap<(Option<NodeId>, bool), Vec<VertexRef>> = BTreeMap::new();
        let exhausted = ctx.mem.is_exhausted();
        for w in self.fetcher.wanted.values_mut() {
            if exhausted && !w.fallback {
                continue;
            }
            let target = if w.attempts == 0 { w.hint.filter(|h| *h != self.me) } else { None };
            w.attempts += 1;
            batches.entry((target, w.fallback)).or_default().push(w.vref);
        }
        for ((target, fallback), want) in batches {
            let floor = want.iter().map(|r| r.round).min().unwrap_or(0).saturating_sub(SYNC_DEPTH);
            let m = Message::SyncRequest { want, floor, fallback };
            match target {
                Some(t) => ctx.send(t, m),
                None => {
                    for p in self.committee.nodes().filter(|p| *p != self.me) {
                        ctx.send(p, m.clone());
                    }
                }
            }
        }
        self.fetcher.armed = true;
        ctx.timer(ctx.now + self.sync_retry, Timer::Sync);
    }

    /// Answer with the requested vertices plus stored ancestors down to
    /// `floor`.
    pub fn answer_sync(
        &self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        want: &[VertexRef],
        floor: Round,
        fallback: bool,
        extra: impl Fn(&Digest) -> Option<VertexPtr>,
    ) {
        if !fallback && ctx.mem.is_exhausted() {
            return;
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut stack: Vec<Digest> = want.iter().map(|r| r.digest).collect();
        while let Some(d) = stack.pop() {
            if out.len() >= SYNC_REPLY_CAP || !seen.insert(d) {
                continue;
            }
            let Some(v) = self.store.get(&d).cloned().or_else(|| extra(&d)) else {
                continue;
            };
            for r in v.references() {
                if r.round >= floor.max(1) {
                    stack.push(r.digest);
                }
            }
            out.push(v);
        }
        if out.is_empty() {
            return;
        }
        out.sort_by_key(|v| (v.round(), v.creator(), v.digest()));
        ctx.send(from, Message::SyncReply { vertices: out, fallback });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::Vertex;

    #[test]
    fn tx_source_rate_is_exact() {
        // 1000 tx/s over 4 nodes: 250 tx/s each, 1 tx every 4 ms
        let mut t = TxSource::new(1000, 4, 512, 10_000, 1, NodeId(0));
        assert_eq!(t.take(1000).len(), 250 * 512);
        assert_eq!(t.pending(1003), 0);
        assert_eq!(t.pending(1004), 1);
        assert_eq!(t.take(2000).len(), 250 * 512);
    }

    #[test]
    fn tx_source_caps_batches() {
        let mut t = TxSource::new(1000, 1, 10, 100, 1, NodeId(0));
        assert_eq!(t.take(1000).len(), 1000);
        assert_eq!(t.pending(1000), 900);
    }

    #[test]
    fn fetcher_needs_distinct_confirmations() {
        let mut f = Fetcher::new(2);
        let v = Arc::new(Vertex::genesis(NodeId(1)));
        assert!(f.want(v.reference(), false, None));
        assert!(!f.want(v.reference(), false, None));
        assert!(f.offer(NodeId(2), v.clone()).is_none());
        assert!(f.offer(NodeId(2), v.clone()).is_none(), "same peer twice");
        assert!(f.offer(NodeId(3), v.clone()).is_some());
        assert_eq!(f.outstanding(), 0);
    }
}
