//! Uncertified DAG engine: vertices travel by best-effort broadcast and
//! leaders are decided by reading certificate and skip patterns off the DAG.

mod decide;

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::dag::{DagStore, NodeId, Round, Vertex, VertexPtr, VertexRef};
use crate::lifefin::{self, Gate, PostPtr, TriggerReason};
use crate::node::{Admit, Core, Ctx, Engine, Leaders, MetricEvent, Timer};
use crate::simnet::Millis;
use crate::wire::Message;

pub use decide::{Decider, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MysticetiConfig {
    pub leader_timeout: Millis,
}

impl Default for MysticetiConfig {
    fn default() -> Self {
        Self { leader_timeout: 1_000 }
    }
}

/// Resumption vertices that arrive before our own fallback finishes.
const EARLY_CAP: usize = 256;

pub struct Mysticeti {
    pub(crate) core: Core,
    cfg: MysticetiConfig,
    pub(crate) leaders: Leaders,
    pub(crate) round: Round,
    expired: BTreeSet<Round>,
    pub(crate) fb_rounds: BTreeSet<Round>,
    pub(crate) decider: Decider,
    early: Vec<(NodeId, VertexPtr)>,
}

/// Structural checks on a vertex from the network.
fn well_formed(v: &Vertex, core: &Core, fb_rounds: &BTreeSet<Round>) -> bool {
    let c = core.committee;
    if v.round() < 2 || !c.contains(v.creator()) {
        return false;
    }
    let refs = v.references();
    let mut slots = BTreeSet::new();
    if refs.len() < c.quorum()
        || refs
            .iter()
            .any(|r| r.round >= v.round() || !c.contains(r.creator) || !slots.insert((r.round, r.creator)))
    {
        return false;
    }
    v.is_regular() || (v.round() >= 3 && refs.iter().all(|r| r.round <= v.round() - 2) && fb_rounds.contains(&(v.round() - 2)))
}

/// Uncertified vote gate: a PoST at most one round past ours must have its
/// whole history here before we sign.
pub(crate) fn uncertified_ready(store: &DagStore, round: Round, sb: &lifefin::PostBlock) -> bool {
    sb.vertex.round() > round + 1 || store.is_connected(&sb.vertex.digest())
}

pub(crate) fn uncertified_gate(store: &DagStore, round: Round, sb: &lifefin::PostBlock) -> Gate {
    if uncertified_ready(store, round, sb) {
        Gate::Vote
    } else {
        Gate::Wait(lifefin::history_wants(store, &[sb.vertex.reference()]))
    }
}

impl Mysticeti {
    pub fn new(core: Core, cfg: MysticetiConfig) -> Self {
        let committee = core.committee;
        Self {
            core,
            cfg,
            leaders: Leaders::new(committee),
            round: 1,
            expired: BTreeSet::new(),
            fb_rounds: BTreeSet::new(),
            decider: Decider::new(committee),
            early: Vec::new(),
        }
    }

    pub fn committed_round(&self) -> Round {
        self.decider.finalized()
    }

    pub(crate) fn enter(&mut self, ctx: &mut Ctx<'_>, r: Round) {
        self.round = r;
        ctx.timer(ctx.now + self.cfg.leader_timeout, Timer::Leader(r));
    }

    fn try_advance(&mut self, ctx: &mut Ctx<'_>) {
        let q = self.core.committee.quorum();
        loop {
            if self.core.fb.in_fallback() || ctx.mem.is_exhausted() || self.core.fb.decision().is_some() {
                return;
            }
            let store = &self.core.store;
            let h = store.highest_round();
            if h > self.round {
                if let Some(r) = (self.round + 1..=h).rev().find(|&r| store.round_creators(r) >= q) {
                    self.enter(ctx, r);
                }
            }
            let store = &self.core.store;
            let r = self.round;
            if store.round_creators(r) < q {
                return;
            }
            let next = r + 1;
            let me = self.core.me;
            let beh = self.core.behavior;
            if beh.skips_own_leader_round() && self.leaders.of(next) == me {
                self.enter(ctx, next);
                continue;
            }
            let lv = store.connected_slot(r, self.leaders.of(r)).map(|v| v.digest());
            let withhold = beh.withholds_leader_refs();
            if lv.is_none() && !withhold && !self.expired.contains(&r) {
                return;
            }
            let refs: Vec<VertexRef> = store
                .round_primaries(r)
                .iter()
                .filter(|v| !(withhold && Some(v.digest()) == lv))
                .map(|v| v.reference())
                .collect();
            if refs.len() < q {
                return;
            }
            if let Some(reason) = self.core.fb.check_trigger(store.uncommitted_bytes(), next, ctx.now) {
                self.switch(ctx, reason);
                return;
            }
            let payload = self.core.tx.take(ctx.now);
            let v = Arc::new(Vertex::new(next, me, payload, refs, None));
            self.disseminate(ctx, v);
            self.enter(ctx, next);
        }
    }

    pub(crate) fn disseminate(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr) {
        let me = self.core.me;
        self.core.own.insert(v.round(), v.clone());
        ctx.emit(MetricEvent::VertexCreated {
            vertex: v.reference(),
            bytes: v.size() as u64,
        });
        self.core.admit(ctx, v.clone(), false, false);
        if self.core.behavior.equivocates() {
            let mut other = v.payload().to_vec();
            other.push(0xee);
            let v2 = Arc::new(Vertex::new(v.round(), me, other, v.references().to_vec(), None));
            let n = self.core.committee.n();
            for p in self.core.committee.nodes().filter(|p| *p != me) {
                let m = if p.index() < n / 2 { v.clone() } else { v2.clone() };
                ctx.send(p, Message::Vertex(m));
            }
        } else {
            for p in self.core.committee.nodes().filter(|p| *p != me) {
                ctx.send(p, Message::Vertex(v.clone()));
            }
        }
    }

    /// Store a vertex, recording a conflicting version as evidence and
    /// fetching missing parents.
    pub(crate) fn accept(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr, fallback: bool, hint: Option<NodeId>) {
        let (res, ins) = self.core.admit(ctx, v.clone(), false, fallback);
        let ins = if res == Admit::Conflict {
            self.core.admit(ctx, v, true, fallback).1
        } else {
            ins
        };
        if !ins.missing.is_empty() {
            self.core.want(ctx, &ins.missing, fallback, hint);
        }
    }

    fn on_vertex(&mut self, ctx: &mut Ctx<'_>, from: NodeId, v: VertexPtr) {
        if ctx.mem.is_exhausted() || v.creator() != from {
            return;
        }
        if self.core.fb.in_fallback() || self.core.fb.decision().is_some() {
            // a peer that already finished may send its resumption vertex
            if !v.is_regular() && self.early.len() < EARLY_CAP {
                self.early.push((from, v));
            }
            return;
        }
        if !well_formed(&v, &self.core, &self.fb_rounds) {
            return;
        }
        self.accept(ctx, v, false, Some(from));
    }

    fn on_sync_reply(&mut self, ctx: &mut Ctx<'_>, from: NodeId, vertices: Vec<VertexPtr>, fallback: bool) {
        if !fallback && (self.core.fb.in_fallback() || ctx.mem.is_exhausted()) {
            return;
        }
        for v in vertices {
            if self.core.store.contains(&v.digest()) || !well_formed(&v, &self.core, &self.fb_rounds) {
                continue;
            }
            if let Some(v) = self.core.fetcher.offer(from, v) {
                self.accept(ctx, v, fallback, Some(from));
            }
        }
    }

    pub(crate) fn switch(&mut self, ctx: &mut Ctx<'_>, reason: TriggerReason) {
        if self.core.fb.in_fallback() {
            return;
        }
        let vertex = if self.core.behavior.phantom_post() {
            lifefin::phantom_vertex(&self.core, self.round)
        } else {
            self.core.latest_own()
        };
        self.core.fb.switch(ctx, vertex, reason);
    }

    fn on_post(&mut self, ctx: &mut Ctx<'_>, from: NodeId, sb: PostPtr) {
        if self.core.behavior.phantom_post() && !self.core.fb.in_fallback() && sb.view == self.core.fb.view() {
            self.switch(ctx, TriggerReason::Stuck);
        }
        let (store, round) = (&self.core.store, self.round);
        let gate = |b: &lifefin::PostBlock| uncertified_gate(store, round, b);
        let missing = self.core.fb.on_post(ctx, from, sb.clone(), store, gate);
        if !missing.is_empty() {
            if !self.core.store.contains(&sb.vertex.digest()) && well_formed(&sb.vertex, &self.core, &self.fb_rounds) {
                self.accept(ctx, sb.vertex.clone(), true, Some(from));
            }
            self.core.want(ctx, &missing, true, Some(from));
        }
    }

    /// Decide leaders, ordering the decided prefix.
    pub(crate) fn try_decide(&mut self, ctx: &mut Ctx<'_>) {
        if self.core.fb.in_fallback() {
            return;
        }
        let decided = self.decider.decide(&self.core.store, &self.leaders);
        for (slot, status, kind) in decided {
            let Status::Commit(v) = status else {
                self.decider.finalize(slot);
                continue;
            };
            match self.core.store.causal_history(&v.digest()) {
                Ok(_) => {}
                Err(missing) => {
                    self.core.want(ctx, &missing.0, false, Some(v.creator()));
                    return;
                }
            }
            let complete = self.core.order_history(ctx, &v.reference()).is_some();
            ctx.emit(MetricEvent::LeaderCommitted {
                leader: v.reference(),
                kind,
                history_complete: complete,
            });
            self.decider.finalize(slot);
            self.core.fb.note_commit(ctx.now);
        }
    }

    fn settle(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            let mut progress = false;
            if self.core.fb.has_awaiting() {
                let (store, round) = (&self.core.store, self.round);
                let waiting = self.core.fb.retry_awaiting(ctx, (store.epoch(), round), |b| uncertified_ready(store, round, b));
                let missing = lifefin::history_wants(store, &waiting);
                self.core.want(ctx, &missing, true, None);
            }
            if self.core.fb.decision().is_some() {
                progress |= self.try_finalize(ctx);
            }
            if !progress {
                break;
            }
        }
        self.try_decide(ctx);
        self.core.fb.record_leftover(self.core.store.uncommitted_bytes());
        if let Some(TriggerReason::ByteLimit) = self.core.fb.check_trigger(self.core.store.uncommitted_bytes(), self.round, ctx.now) {
            self.switch(ctx, TriggerReason::ByteLimit);
        }
        self.try_advance(ctx);
    }

    fn dispatch(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        match msg {
            Message::Vertex(v) => self.on_vertex(ctx, from, v),
            Message::VertexRbc(_) | Message::NoVote { .. } => {}
            Message::SyncRequest { want, floor, fallback } => {
                self.core.answer_sync(ctx, from, &want, floor, fallback, |_| None);
            }
            Message::SyncReply { vertices, fallback } => self.on_sync_reply(ctx, from, vertices, fallback),
            Message::Post(sb) => self.on_post(ctx, from, sb),
            Message::PostVote { view, creator, sig } => self.core.fb.on_vote(ctx, from, view, creator, sig),
            Message::Acs(m) => self.core.fb.on_acs(ctx, from, m),
        }
    }

    pub(crate) fn redispatch(&mut self, ctx: &mut Ctx<'_>, msgs: Vec<(NodeId, Message)>) {
        for (from, m) in msgs {
            self.dispatch(ctx, from, m);
        }
    }

    pub(crate) fn take_early(&mut self) -> Vec<(NodeId, VertexPtr)> {
        std::mem::take(&mut self.early)
    }
}

impl Engine for Mysticeti {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        self.enter(ctx, 1);
        self.settle(ctx);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        self.dispatch(ctx, from, msg);
        self.settle(ctx);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        match timer {
            Timer::Leader(r) => {
                self.expired.insert(r);
            }
            Timer::Stuck(view) => {
                if self.core.fb.on_stuck_timer(ctx, view) {
                    self.switch(ctx, TriggerReason::Stuck);
                }
            }
            Timer::Sync => self.core.on_sync_timer(ctx),
            Timer::Pace => {}
        }
        self.settle(ctx);
    }

    fn core(&self) -> &Core {
        &self.core
    }

    fn current_round(&self) -> Round {
        self.round
    }
}
