//! The fallback: when the DAG stops committing, nodes stop extending it,
//! certify where they are stuck (PoST blocks), agree on a common subset of
//! those blocks, and resume from a leader chosen out of that subset.
//!
//! This module holds the engine-independent state machine. How a PoST is
//! gated before voting and how the decided subset is folded back into the
//! DAG differ per engine and live next to each engine.

mod certified;
mod uncertified;
mod post;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acs::{AcsInstance, AcsMessage, CommonCoin};
use crate::dag::{form_certificate, Committee, DagStore, KeyRegistry, NodeId, Round, Signature, SigningKey, VertexPtr, VertexRef};
use crate::node::{Ctx, MetricEvent, Timer};
use crate::simnet::{Millis, MsgClass};
use crate::wire::Message;

pub use post::{PostBlock, PostInvalid, PostPtr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackConfig {
    pub enabled: bool,
    /// Uncommitted bytes above which a node gives up on the DAG.
    pub ub_limit: u64,
    /// No commit for this long after seeing a PoST also triggers.
    pub stuck_timeout: Millis,
    /// Experiment knob: trigger once on reaching this round.
    pub trigger_round: Option<Round>,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ub_limit: 8 << 20,
            stuck_timeout: 5_000,
            trigger_round: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerReason {
    ByteLimit,
    Stuck,
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Optimistic path: the DAG protocol runs.
    Op,
    /// Fallback path: DAG traffic is ignored until the ACS decides.
    Fp,
}

/// An engine's verdict on whether a valid PoST may be signed now.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Gate {
    Vote,
    /// Sign once these vertices (and their histories) are local.
    Wait(Vec<VertexRef>),
}

/// One decided fallback instance as this node saw it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FallbackRecord {
    pub view: u64,
    pub decided_at: Millis,
    pub blocks: Vec<PostPtr>,
    pub bytes_used: u64,
    pub aba_rounds: u32,
}

const FUTURE_CAP: usize = 20_000;

pub struct Fallback {
    cfg: FallbackConfig,
    committee: Committee,
    me: NodeId,
    registry: Arc<KeyRegistry>,
    key: SigningKey,
    coin: CommonCoin,
    silent: bool,
    mode: Mode,
    view: u64,
    own_post: Option<PostPtr>,
    sigs: BTreeMap<NodeId, Signature>,
    proposed: bool,
    seen: BTreeMap<NodeId, PostPtr>,
    voted: BTreeSet<NodeId>,
    awaiting: BTreeMap<NodeId, PostPtr>,
    /// Local state the awaiting PoSTs were last gated against.
    gated_at: Option<(u64, Round)>,
    future: Vec<(NodeId, Message)>,
    acs: Option<AcsInstance<PostPtr>>,
    prev_acs: Option<AcsInstance<PostPtr>>,
    acs_charged: u64,
    decision: Option<Vec<PostPtr>>,
    post_seen_at: Option<Millis>,
    last_commit: Millis,
    /// Set by `finish`. For one stuck timeout afterwards the byte limit is
    /// raised to the backlog left once the decided history is ordered, so an
    /// undrained remainder does not re-trigger at once but growth beyond it
    /// still does.
    finished_at: Option<Millis>,
    /// That leftover; `None` until the engine reports it.
    grace_ub: Option<u64>,
    round_trigger_used: bool,
    /// Refunded when the instance finishes.
    transient: u64,
    /// Everything charged during this instance, refunded or not.
    instance_bytes: u64,
    overflow: u64,
    pub history: Vec<FallbackRecord>,
}

impl Fallback {
    pub fn new(cfg: FallbackConfig, me: NodeId, registry: Arc<KeyRegistry>, coin_seed: u64, silent: bool) -> Self {
        Self {
            cfg,
            committee: registry.committee(),
            me,
            key: registry.signing_key(me),
            registry,
            coin: CommonCoin { seed: coin_seed },
            silent,
            mode: Mode::Op,
            view: 0,
            own_post: None,
            sigs: BTreeMap::new(),
            proposed: false,
            seen: BTreeMap::new(),
            voted: BTreeSet::new(),
            awaiting: BTreeMap::new(),
            gated_at: None,
            future: Vec::new(),
            acs: None,
            prev_acs: None,
            acs_charged: 0,
            decision: None,
            post_seen_at: None,
            last_commit: 0,
            finished_at: None,
            grace_ub: None,
            round_trigger_used: false,
            transient: 0,
            instance_bytes: 0,
            overflow: 0,
            history: Vec::new(),
        }
    }

    pub fn config(&self) -> &FallbackConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn in_fallback(&self) -> bool {
        self.mode == Mode::Fp
    }

    /// Current fallback view: the r_fb of the last decided instance.
    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn decision(&self) -> Option<&[PostPtr]> {
        self.decision.as_deref()
    }

    /// Bytes that did not fit the reserve.
    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn note_commit(&mut self, now: Millis) {
        self.last_commit = self.last_commit.max(now);
    }

    /// Vertex bytes fetched on the fallback path (refunded on ordering).
    pub fn note_fallback_bytes(&mut self, bytes: u64) {
        self.instance_bytes += bytes;
    }

    fn charge(&mut self, ctx: &mut Ctx<'_>, bytes: u64) {
        self.instance_bytes += bytes;
        if ctx.mem.charge(bytes, MsgClass::Fallback).is_ok() {
            self.transient += bytes;
        } else {
            self.overflow += bytes;
        }
    }

    /// Called by the engine after its commit step; only the first report
    /// after an instance finishes counts.
    pub fn record_leftover(&mut self, ub: u64) {
        if self.finished_at.is_some() && self.grace_ub.is_none() {
            self.grace_ub = Some(ub);
        }
    }

    /// Conditions checked on every store change and round entry.
    pub fn check_trigger(&self, ub: u64, round: Round, now: Millis) -> Option<TriggerReason> {
        if !self.cfg.enabled || self.mode == Mode::Fp || self.decision.is_some() {
            return None;
        }
        let grace = self.finished_at.is_some_and(|t| now < t + self.cfg.stuck_timeout);
        let limit = match (grace, self.grace_ub) {
            (false, _) => self.cfg.ub_limit,
            (true, None) => u64::MAX,
            (true, Some(left)) => self.cfg.ub_limit.max(left),
        };
        if ub > limit {
            return Some(TriggerReason::ByteLimit);
        }
        match self.cfg.trigger_round {
            Some(r) if !self.round_trigger_used && round >= r => Some(TriggerReason::Round),
            _ => None,
        }
    }

    /// The stuck clock: true if the fallback should start now.
    pub fn on_stuck_timer(&mut self, ctx: &mut Ctx<'_>, view: u64) -> bool {
        if view != self.view || self.mode == Mode::Fp || !self.cfg.enabled || self.decision.is_some() {
            return false;
        }
        let Some(seen) = self.post_seen_at else { return false };
        let deadline = seen.max(self.last_commit) + self.cfg.stuck_timeout;
        if ctx.now >= deadline {
            true
        } else {
            ctx.timer(deadline, Timer::Stuck(self.view));
            false
        }
    }

    /// Enter the fallback path, multicasting a PoST over `vertex`.
    pub fn switch(&mut self, ctx: &mut Ctx<'_>, vertex: VertexPtr, reason: TriggerReason) {
        if self.mode == Mode::Fp {
            return;
        }
        self.mode = Mode::Fp;
        if reason == TriggerReason::Round {
            self.round_trigger_used = true;
        }
        ctx.emit(MetricEvent::FallbackTriggered { view: self.view, reason });
        if self.silent {
            return;
        }
        let sb = Arc::new(PostBlock {
            view: self.view,
            creator: self.me,
            vertex,
            cert: None,
        });
        self.own_post = Some(sb.clone());
        ctx.broadcast(Message::Post(sb));
    }

    fn buffer(&mut self, from: NodeId, m: Message) {
        if self.future.len() < FUTURE_CAP {
            self.future.push((from, m));
        }
    }

    /// Receiver-side validity of a plain PoST.
    pub fn check_post(&self, sb: &PostBlock, store: &DagStore) -> Result<(), PostInvalid> {
        if sb.view != self.view {
            return Err(PostInvalid::ViewMismatch);
        }
        if sb.vertex.creator() != sb.creator {
            return Err(PostInvalid::WrongCreator);
        }
        if self.seen.contains_key(&sb.creator) {
            return Err(PostInvalid::Duplicate);
        }
        let latest = store.latest_round_of(sb.creator).unwrap_or(0);
        let r = sb.vertex.round();
        if r < latest {
            return Err(PostInvalid::StaleVertex);
        }
        if r == latest && store.slot(r, sb.creator).map(|v| v.digest()) != Some(sb.vertex.digest()) {
            return Err(PostInvalid::StaleVertex);
        }
        Ok(())
    }

    /// Handle a PoST. Returns vertices the engine should fetch before the
    /// vote can go out.
    pub fn on_post(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        sb: PostPtr,
        store: &DagStore,
        gate: impl Fn(&PostBlock) -> Gate,
    ) -> Vec<VertexRef> {
        if from != sb.creator {
            return Vec::new();
        }
        if sb.view > self.view {
            self.buffer(from, Message::Post(sb));
            return Vec::new();
        }
        if self.check_post(&sb, store).is_err() {
            return Vec::new();
        }
        self.seen.insert(sb.creator, sb.clone());
        self.charge(ctx, sb.size() as u64);
        if self.post_seen_at.is_none() {
            self.post_seen_at = Some(ctx.now);
            if self.mode == Mode::Op && self.cfg.enabled {
                let at = ctx.now.max(self.last_commit) + self.cfg.stuck_timeout;
                ctx.timer(at, Timer::Stuck(self.view));
            }
        }
        if self.silent {
            return Vec::new();
        }
        match gate(&sb) {
            Gate::Vote => {
                self.vote(ctx, &sb);
                Vec::new()
            }
            Gate::Wait(missing) => {
                self.awaiting.insert(sb.creator, sb);
                self.gated_at = None;
                missing
            }
        }
    }

    /// Re-gate PoSTs waiting on history; returns the wrapped vertices still
    /// not ready. `stamp` identifies the local state (store epoch, round)
    /// `ready` reads; an unchanged stamp is a no-op.
    pub fn retry_awaiting(
        &mut self,
        ctx: &mut Ctx<'_>,
        stamp: (u64, Round),
        ready: impl Fn(&PostBlock) -> bool,
    ) -> Vec<VertexRef> {
        if self.gated_at == Some(stamp) {
            return Vec::new();
        }
        self.gated_at = Some(stamp);
        let mut waiting = Vec::new();
        for sb in self.awaiting.values().cloned().collect::<Vec<_>>() {
            if ready(&sb) {
                self.awaiting.remove(&sb.creator);
                self.vote(ctx, &sb);
            } else {
                waiting.push(sb.vertex.reference());
            }
        }
        waiting
    }

    pub fn has_awaiting(&self) -> bool {
        !self.awaiting.is_empty()
    }

    fn vote(&mut self, ctx: &mut Ctx<'_>, sb: &PostBlock) {
        if !self.voted.insert(sb.creator) {
            return;
        }
        let sig = self.key.sign(sb.message());
        ctx.send(
            sb.creator,
            Message::PostVote {
                view: sb.view,
                creator: sb.creator,
                sig,
            },
        );
    }

    pub fn on_vote(&mut self, ctx: &mut Ctx<'_>, from: NodeId, view: u64, creator: NodeId, sig: Signature) {
        if view > self.view {
            self.buffer(from, Message::PostVote { view, creator, sig });
            return;
        }
        if view < self.view || creator != self.me || self.proposed || sig.signer != from {
            return;
        }
        let Some(own) = self.own_post.clone() else { return };
        if sig.message != own.message() || !self.registry.verify(&sig) {
            return;
        }
        self.sigs.insert(from, sig);
        if self.sigs.len() < self.committee.quorum() {
            return;
        }
        let sigs: Vec<Signature> = self.sigs.values().copied().collect();
        let Ok(cert) = form_certificate(&self.registry, &sigs) else { return };
        let certified = Arc::new(PostBlock {
            cert: Some(cert),
            ..(*own).clone()
        });
        self.proposed = true;
        let valid = certified.has_valid_cert(&self.registry);
        let acs = self.acs_instance();
        if let Ok(out) = acs.propose(certified, valid) {
            for m in out.broadcasts {
                ctx.broadcast(Message::Acs(m));
            }
        }
    }

    fn acs_instance(&mut self) -> &mut AcsInstance<PostPtr> {
        let (c, me, view, coin) = (self.committee, self.me, self.view, self.coin);
        self.acs.get_or_insert_with(|| AcsInstance::new(c, me, view, coin))
    }

    pub fn on_acs(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: AcsMessage<PostPtr>) {
        let v = msg.view();
        let registry = self.registry.clone();
        let valid = move |view: u64| {
            move |slot: NodeId, p: &PostPtr| {
                p.view == view && p.creator == slot && p.vertex.creator() == slot && p.has_valid_cert(&registry)
            }
        };
        if v > self.view {
            self.buffer(from, Message::Acs(msg));
            return;
        }
        if v < self.view {
            // keep relaying for nodes still finishing the previous instance
            if let Some(prev) = self.prev_acs.as_mut().filter(|a| a.view() == v) {
                let out = prev.handle(from, msg, valid(v), |p| p.size() as u64);
                if !self.silent {
                    for m in out.broadcasts {
                        ctx.broadcast(Message::Acs(m));
                    }
                }
            }
            return;
        }
        let silent = self.silent;
        let acs = self.acs_instance();
        let out = acs.handle(from, msg, valid(v), |p| p.size() as u64);
        let fp = acs.footprint();
        let rounds = acs.max_aba_rounds();
        // silent nodes only listen, so they still learn the decision
        if !silent {
            for m in out.broadcasts {
                ctx.broadcast(Message::Acs(m));
            }
        }
        let delta = fp - self.acs_charged;
        self.acs_charged = fp;
        self.charge(ctx, delta);
        if let Some(decided) = out.decided {
            let blocks: Vec<PostPtr> = decided.into_iter().map(|(_, p)| p).collect();
            ctx.emit(MetricEvent::AcsDecided {
                view: self.view,
                blocks: blocks.iter().map(|b| (b.creator, b.vertex.reference())).collect(),
                bytes_used: self.instance_bytes,
            });
            self.history.push(FallbackRecord {
                view: self.view,
                decided_at: ctx.now,
                blocks: blocks.clone(),
                bytes_used: self.instance_bytes,
                aba_rounds: rounds,
            });
            self.decision = Some(blocks);
        }
    }

    /// The engine folded the decision into its DAG: move to view `r_fb`,
    /// back on the optimistic path. Returns buffered later-view messages
    /// for re-dispatch.
    pub fn finish(&mut self, ctx: &mut Ctx<'_>, r_fb: Round) -> Vec<(NodeId, Message)> {
        ctx.emit(MetricEvent::FallbackFinalized { view: self.view, r_fb });
        ctx.mem.refund(self.transient, MsgClass::Fallback);
        self.transient = 0;
        self.instance_bytes = 0;
        self.acs_charged = 0;
        self.view = r_fb;
        self.mode = Mode::Op;
        self.finished_at = Some(ctx.now);
        self.grace_ub = None;
        self.own_post = None;
        self.sigs.clear();
        self.proposed = false;
        self.seen.clear();
        self.voted.clear();
        self.awaiting.clear();
        self.gated_at = None;
        self.decision = None;
        self.post_seen_at = None;
        self.prev_acs = self.acs.take();
        let future = std::mem::take(&mut self.future);
        let (now_view, later): (Vec<_>, Vec<_>) = future.into_iter().partition(|(_, m)| msg_view(m) <= Some(r_fb));
        self.future = later;
        now_view
    }
}

/// What to fetch before `roots` connect: the absent roots themselves and
/// the absent ancestors of the stored ones.
pub(crate) fn history_wants(store: &DagStore, roots: &[VertexRef]) -> Vec<VertexRef> {
    let (have, absent): (Vec<&VertexRef>, Vec<&VertexRef>) = roots.iter().partition(|r| store.contains(&r.digest));
    let mut out = store.absent_ancestors_of(have.into_iter().map(|r| r.digest));
    out.extend(absent.into_iter().copied());
    out
}

fn msg_view(m: &Message) -> Option<u64> {
    match m {
        Message::Post(sb) => Some(sb.view),
        Message::PostVote { view, .. } => Some(*view),
        Message::Acs(a) => Some(a.view()),
        _ => None,
    }
}

/// A vertex one round past the node's latest, whose references look like
/// a quorum but one of them points at nothing.
pub(crate) fn phantom_vertex(core: &crate::node::Core, round_hint: Round) -> VertexPtr {
    let latest = core.latest_own();
    let r = latest.round().max(round_hint) + 1;
    let mut refs: Vec<VertexRef> = core
        .store
        .round_primaries(r - 1)
        .iter()
        .take(core.committee.quorum())
        .map(|v| v.reference())
        .collect();
    if refs.is_empty() {
        refs.push(latest.reference());
    }
    let last = refs.last_mut().expect("non-empty");
    last.digest = crate::dag::Digest::of("phantom", |h| {
        sha2::Digest::update(h, last.digest.as_bytes());
    });
    Arc::new(crate::dag::Vertex::new(r, core.me, vec![0xba; 64], refs, None))
}

/// Deterministic choice of the fallback leader block: the predefined
/// leader's round-`r_fb` vertex if decided, else the smallest-digest block
/// among those at `r_fb`.
pub fn select_leader_block(blocks: &[PostPtr], predefined: NodeId) -> (PostPtr, bool) {
    let r_fb = blocks.iter().map(|b| b.vertex.round()).max().expect("ACS output is non-empty");
    if let Some(b) = blocks
        .iter()
        .find(|b| b.vertex.creator() == predefined && b.vertex.round() == r_fb)
    {
        return (b.clone(), true);
    }
    let b = blocks
        .iter()
        .filter(|b| b.vertex.round() == r_fb)
        .min_by_key(|b| b.vertex.digest())
        .expect("some block has the max round");
    (b.clone(), false)
}
