//! Certified DAG engine: every vertex goes through reliable broadcast, a
//! round's leader must reference its predecessor or carry a no-vote
//! certificate, and leaders commit directly once 2f+1 first messages of the
//! next round reference them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::dag::{
    form_certificate, Committee, DagStore, Digest, KeyRegistry, NoVoteCertificate, NodeId, Round, Signature, Vertex,
    VertexPtr, VertexRef,
};
use crate::lifefin::{self, Gate, PostPtr, TriggerReason};
use crate::node::{CommitKind, Core, Ctx, Engine, Leaders, MetricEvent, Timer};
use crate::rbc::{Rbc, RbcEvent, RbcMessage, RbcOutput, Validity};
use crate::simnet::{Millis, MsgClass};
use crate::wire::{Message, VertexSlot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SailfishConfig {
    pub leader_timeout: Millis,
}

impl Default for SailfishConfig {
    fn default() -> Self {
        Self { leader_timeout: 1_000 }
    }
}

pub struct Sailfish {
    pub(crate) core: Core,
    cfg: SailfishConfig,
    rbc: Rbc<VertexSlot, VertexPtr>,
    pub(crate) leaders: Leaders,
    /// Round whose vertices we are collecting to build the next one.
    pub(crate) round: Round,
    pub(crate) committed_round: Round,
    first_msgs: BTreeMap<Round, BTreeMap<NodeId, VertexPtr>>,
    no_votes: BTreeMap<Round, BTreeMap<NodeId, Signature>>,
    expired: BTreeSet<Round>,
    /// r_fb of every finalized fallback.
    pub(crate) fb_rounds: BTreeSet<Round>,
    /// RBC traffic at or below this round is stale (set by each fallback).
    pub(crate) floor: Round,
    /// Vertices delivered while in the fallback path, kept off the store.
    pub(crate) side: BTreeMap<Digest, VertexPtr>,
    pub(crate) side_bytes: u64,
    work: Vec<RbcOutput<VertexSlot, VertexPtr>>,
}

/// Bytes of fallback-path deliveries a node keeps outside its store.
pub const SIDE_CAP: u64 = 1 << 20;

/// Proposal check run before echoing.
fn validate(
    avail: impl Fn(&Digest) -> bool,
    registry: &KeyRegistry,
    committee: Committee,
    fb_rounds: &BTreeSet<Round>,
    id: VertexSlot,
    v: &Vertex,
) -> Validity {
    if v.round() != id.round || v.creator() != id.creator || v.round() < 2 {
        return Validity::Invalid;
    }
    let refs = v.references();
    let mut slots = BTreeSet::new();
    if refs.len() < committee.quorum()
        || refs
            .iter()
            .any(|r| r.round >= v.round() || !committee.contains(r.creator) || !slots.insert((r.round, r.creator)))
    {
        return Validity::Invalid;
    }
    if !v.is_regular() {
        // only the first vertex after a finalized fallback may skip rounds
        if v.round() < 3 || refs.iter().any(|r| r.round > v.round() - 2) {
            return Validity::Invalid;
        }
        if !fb_rounds.contains(&(v.round() - 2)) {
            return Validity::Defer;
        }
    } else if v.creator() == committee.leader(v.round()) {
        let prev = v.round() - 1;
        let pl = committee.leader(prev);
        let has_pred = refs.iter().any(|r| r.round == prev && r.creator == pl);
        let has_nvc = v.aux().is_some_and(|nvc| {
            nvc.round == prev
                && nvc.cert.message == NoVoteCertificate::message(prev)
                && registry.verify_certificate(&nvc.cert).is_ok()
        });
        if !has_pred && !has_nvc {
            return Validity::Invalid;
        }
    }
    if refs.iter().any(|r| !avail(&r.digest)) {
        return Validity::Defer;
    }
    Validity::Valid
}

/// Certified vote gate: the wrapped vertex must be connected locally.
pub(crate) fn certified_ready(store: &DagStore, sb: &lifefin::PostBlock) -> bool {
    store.is_connected(&sb.vertex.digest())
}

pub(crate) fn certified_gate(store: &DagStore, sb: &lifefin::PostBlock) -> Gate {
    if certified_ready(store, sb) {
        Gate::Vote
    } else {
        Gate::Wait(lifefin::history_wants(store, &[sb.vertex.reference()]))
    }
}

impl Sailfish {
    pub fn new(core: Core, cfg: SailfishConfig) -> Self {
        let committee = core.committee;
        Self {
            rbc: Rbc::new(committee, core.me),
            leaders: Leaders::new(committee),
            core,
            cfg,
            round: 1,
            committed_round: 0,
            first_msgs: BTreeMap::new(),
            no_votes: BTreeMap::new(),
            expired: BTreeSet::new(),
            fb_rounds: BTreeSet::new(),
            floor: 0,
            side: BTreeMap::new(),
            side_bytes: 0,
            work: Vec::new(),
        }
    }

    pub fn committed_round(&self) -> Round {
        self.committed_round
    }

    fn quorum(&self) -> usize {
        self.core.committee.quorum()
    }

    pub(crate) fn enter(&mut self, ctx: &mut Ctx<'_>, r: Round) {
        self.round = r;
        ctx.timer(ctx.now + self.cfg.leader_timeout, Timer::Leader(r));
    }

    fn nvc(&self, r: Round) -> Option<NoVoteCertificate> {
        let sigs = self.no_votes.get(&r)?;
        if sigs.len() < self.quorum() {
            return None;
        }
        let sigs: Vec<Signature> = sigs.values().copied().collect();
        let cert = form_certificate(&self.core.registry, &sigs).ok()?;
        Some(NoVoteCertificate { round: r, cert })
    }

    /// Build and broadcast the next vertex while the round rules allow it.
    fn try_advance(&mut self, ctx: &mut Ctx<'_>) {
        let q = self.quorum();
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
            let refs_leader = lv.is_some() && !withhold;
            let aux = if self.leaders.of(next) == me && !refs_leader {
                let sig = self.core.key.sign(NoVoteCertificate::message(r));
                self.no_votes.entry(r).or_default().insert(me, sig);
                match self.nvc(r) {
                    Some(c) => Some(c),
                    None => return,
                }
            } else {
                None
            };
            if let Some(reason) = self.core.fb.check_trigger(store.uncommitted_bytes(), next, ctx.now) {
                self.switch(ctx, reason);
                return;
            }
            let payload = self.core.tx.take(ctx.now);
            let v = Arc::new(Vertex::new(next, me, payload, refs, aux));
            self.disseminate(ctx, v);
            if !refs_leader {
                let sig = self.core.key.sign(NoVoteCertificate::message(r));
                ctx.send(self.leaders.of(next), Message::NoVote { round: r, sig });
            }
            self.enter(ctx, next);
        }
    }

    pub(crate) fn disseminate(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr) {
        let me = self.core.me;
        let id = VertexSlot {
            round: v.round(),
            creator: me,
        };
        self.core.own.insert(v.round(), v.clone());
        ctx.emit(MetricEvent::VertexCreated {
            vertex: v.reference(),
            bytes: v.size() as u64,
        });
        let Ok(out) = self.rbc.broadcast(id, v.clone()) else { return };
        if self.core.behavior.equivocates() {
            let mut other = v.payload().to_vec();
            other.push(0xee);
            let v2 = Arc::new(Vertex::new(v.round(), me, other, v.references().to_vec(), v.aux().cloned()));
            let n = self.core.committee.n();
            for p in self.core.committee.nodes() {
                let payload = if p == me || p.index() < n / 2 { v.clone() } else { v2.clone() };
                ctx.send(p, Message::VertexRbc(RbcMessage::Propose { id, payload }));
            }
            return;
        }
        for b in out.broadcasts {
            ctx.broadcast(Message::VertexRbc(b));
        }
    }

    fn on_rbc(&mut self, ctx: &mut Ctx<'_>, from: NodeId, m: RbcMessage<VertexSlot, VertexPtr>) {
        if ctx.mem.is_exhausted() {
            return;
        }
        if m.id().round <= self.floor {
            return;
        }
        let (store, side) = (&self.core.store, &self.side);
        let (reg, c, fbr) = (&self.core.registry, self.core.committee, &self.fb_rounds);
        let avail = |d: &Digest| store.is_connected(d) || side.contains_key(d);
        let id = m.id();
        let out = self.rbc.handle(from, m, |v| validate(avail, reg, c, fbr, id, v));
        self.work.push(out);
    }

    /// Drain queued RBC outputs, including deliveries they cause.
    fn pump(&mut self, ctx: &mut Ctx<'_>) {
        while let Some(out) = self.work.pop() {
            if !ctx.mem.is_exhausted() {
                for b in out.broadcasts {
                    ctx.broadcast(Message::VertexRbc(b));
                }
            }
            for ev in out.events {
                match ev {
                    RbcEvent::FirstMessage { id, payload } => {
                        if self.core.fb.in_fallback() {
                            continue;
                        }
                        self.first_msgs.entry(id.round).or_default().insert(id.creator, payload);
                        if id.round >= 2 {
                            self.try_commit(ctx, id.round - 1);
                        }
                    }
                    RbcEvent::Delivered { payload, .. } => self.on_delivered(ctx, payload),
                }
            }
        }
    }

    fn on_delivered(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr) {
        if self.core.fb.in_fallback() {
            self.side_insert(ctx, v);
            return;
        }
        let (_, ins) = self.core.admit(ctx, v, false, false);
        self.on_connected(ctx, &ins.connected);
    }

    /// Keep a fallback-path delivery, evicting the oldest rounds past the cap.
    fn side_insert(&mut self, ctx: &mut Ctx<'_>, v: VertexPtr) {
        let size = v.size() as u64;
        while self.side_bytes + size > SIDE_CAP {
            let Some((&d, _)) = self.side.iter().min_by_key(|(d, v)| (v.round(), **d)) else { break };
            let old = self.side.remove(&d).expect("present");
            self.side_bytes -= old.size() as u64;
            ctx.mem.refund(old.size() as u64, MsgClass::Fallback);
        }
        if size <= SIDE_CAP && ctx.mem.charge(size, MsgClass::Fallback).is_ok() {
            self.side_bytes += size;
            self.side.insert(v.digest(), v);
        }
    }

    pub(crate) fn side_take(&mut self, d: &Digest) -> Option<VertexPtr> {
        let v = self.side.remove(d)?;
        self.side_bytes -= v.size() as u64;
        Some(v)
    }

    pub(crate) fn on_connected(&mut self, ctx: &mut Ctx<'_>, connected: &[VertexPtr]) {
        if connected.is_empty() {
            return;
        }
        for v in connected {
            if v.creator() == self.leaders.of(v.round()) {
                self.try_commit(ctx, v.round());
            }
        }
        self.revalidate_deferred();
    }

    pub(crate) fn rbc_retain_above(&mut self, floor: Round) {
        self.rbc.retain(|k| k.round > floor);
    }

    pub(crate) fn revalidate_deferred(&mut self) {
        for (id, _) in self.rbc.deferred() {
            let (store, side) = (&self.core.store, &self.side);
            let (reg, c, fbr) = (&self.core.registry, self.core.committee, &self.fb_rounds);
            let avail = |d: &Digest| store.is_connected(d) || side.contains_key(d);
            let out = self.rbc.revalidate(id, |v| validate(avail, reg, c, fbr, id, v));
            self.work.push(out);
        }
    }

    fn try_commit(&mut self, ctx: &mut Ctx<'_>, r: Round) {
        if self.committed_round >= r || self.core.fb.in_fallback() {
            return;
        }
        let Some(fm) = self.first_msgs.get(&(r + 1)) else { return };
        if fm.len() < self.quorum() {
            return;
        }
        let Some(lv) = self.core.store.connected_slot(r, self.leaders.of(r)).cloned() else {
            return;
        };
        let supporters = fm.values().filter(|u| u.references_digest(&lv.digest())).count();
        if supporters >= self.quorum() {
            ctx.emit(MetricEvent::DirectCommitJustified {
                leader: lv.reference(),
                supporters,
            });
            self.commit_leader(ctx, &lv, CommitKind::Direct);
        }
    }

    /// Commit `v` and every earlier uncommitted leader on its path.
    pub(crate) fn commit_leader(&mut self, ctx: &mut Ctx<'_>, v: &VertexPtr, kind: CommitKind) {
        let mut stack = vec![(v.clone(), kind)];
        let mut cur = v.reference();
        for r in (self.committed_round + 1..v.round()).rev() {
            if let Some(l) = self.core.store.connected_slot(r, self.leaders.of(r)) {
                if self.core.store.path_exists(&cur, &l.reference()) {
                    cur = l.reference();
                    stack.push((l.clone(), CommitKind::Indirect));
                }
            }
        }
        self.committed_round = v.round();
        while let Some((l, kind)) = stack.pop() {
            let complete = self.core.order_history(ctx, &l.reference()).is_some();
            ctx.emit(MetricEvent::LeaderCommitted {
                leader: l.reference(),
                kind,
                history_complete: complete,
            });
        }
        self.core.fb.note_commit(ctx.now);
    }

    fn on_no_vote(&mut self, ctx: &mut Ctx<'_>, from: NodeId, round: Round, sig: Signature) {
        if self.leaders.predefined(round + 1) != self.core.me
            || sig.signer != from
            || sig.message != NoVoteCertificate::message(round)
            || !self.core.registry.verify(&sig)
        {
            return;
        }
        // a signer whose next-round vertex references the leader is lying
        let pl = self.leaders.predefined(round);
        if let Some(u) = self.core.store.slot(round + 1, from) {
            if u.references().iter().any(|r| r.round == round && r.creator == pl) {
                return;
            }
        }
        self.no_votes.entry(round).or_default().insert(from, sig);
        let _ = ctx;
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
        let store = &self.core.store;
        let missing = self.core.fb.on_post(ctx, from, sb, store, |b| certified_gate(store, b));
        self.obtain(ctx, missing);
    }

    /// Bring `refs` into the store: from the side buffer if delivered there,
    /// otherwise by fetching (f+1 matching replies).
    pub(crate) fn obtain(&mut self, ctx: &mut Ctx<'_>, refs: Vec<VertexRef>) -> bool {
        let mut fetch = Vec::new();
        let mut any = false;
        for r in refs {
            if self.core.store.contains(&r.digest) {
                continue;
            }
            match self.side_take(&r.digest) {
                Some(v) => {
                    ctx.mem.refund(v.size() as u64, MsgClass::Fallback);
                    let (_, ins) = self.core.admit(ctx, v, false, true);
                    any = true;
                    self.on_connected(ctx, &ins.connected);
                }
                None => fetch.push(r),
            }
        }
        self.core.want(ctx, &fetch, true, None);
        any
    }

    fn on_sync_reply(&mut self, ctx: &mut Ctx<'_>, from: NodeId, vertices: Vec<VertexPtr>, fallback: bool) {
        if !fallback {
            return;
        }
        for v in vertices {
            if self.core.store.contains(&v.digest()) {
                continue;
            }
            if let Some(v) = self.core.fetcher.offer(from, v) {
                let (_, ins) = self.core.admit(ctx, v, false, true);
                self.on_connected(ctx, &ins.connected);
            }
        }
    }

    /// Fallback bookkeeping and round progress after any state change.
    fn settle(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            self.pump(ctx);
            let mut progress = false;
            if self.core.fb.has_awaiting() {
                let store = &self.core.store;
                let waiting = self.core.fb.retry_awaiting(ctx, (store.epoch(), 0), |b| certified_ready(store, b));
                let missing = lifefin::history_wants(store, &waiting);
                progress |= self.obtain(ctx, missing);
            }
            if self.core.fb.decision().is_some() {
                progress |= self.try_finalize(ctx);
            }
            if !progress && self.work.is_empty() {
                break;
            }
        }
        self.core.fb.record_leftover(self.core.store.uncommitted_bytes());
        if let Some(reason) = self.core.fb.check_trigger(self.core.store.uncommitted_bytes(), self.round, ctx.now) {
            if reason == TriggerReason::ByteLimit {
                self.switch(ctx, reason);
            }
        }
        self.try_advance(ctx);
    }

    fn dispatch(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        match msg {
            Message::VertexRbc(m) => self.on_rbc(ctx, from, m),
            Message::NoVote { round, sig } => {
                if !self.core.fb.in_fallback() && !ctx.mem.is_exhausted() {
                    self.on_no_vote(ctx, from, round, sig);
                }
            }
            Message::Vertex(_) => {}
            Message::SyncRequest { want, floor, fallback } => {
                let side = &self.side;
                self.core
                    .answer_sync(ctx, from, &want, floor, fallback, |d| side.get(d).cloned());
            }
            Message::SyncReply { vertices, fallback } => self.on_sync_reply(ctx, from, vertices, fallback),
            Message::Post(sb) => self.on_post(ctx, from, sb),
            Message::PostVote { view, creator, sig } => self.core.fb.on_vote(ctx, from, view, creator, sig),
            Message::Acs(m) => self.core.fb.on_acs(ctx, from, m),
        }
    }

    /// Re-handle messages the fallback buffered for a later view.
    pub(crate) fn redispatch(&mut self, ctx: &mut Ctx<'_>, msgs: Vec<(NodeId, Message)>) {
        for (from, m) in msgs {
            self.dispatch(ctx, from, m);
        }
    }
}

impl Engine for Sailfish {
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

#[cfg(test)]
mod tests;
