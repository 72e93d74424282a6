//! Leader decisions from DAG patterns.
//!
//! For the leader slot of round r:
//! - a round r+1 vertex *supports* a version v of the slot if it references v;
//! - a round r+2 vertex is a *certificate* for v if it references supporters
//!   from at least 2f+1 creators;
//! - v is directly to-commit once 2f+1 creators have a certificate for it at
//!   r+2, and the slot is directly to-skip once, for every version, 2f+1
//!   creators have a round r+1 vertex not referencing it (which also covers
//!   an absent leader).
//!
//! Undecided slots are resolved through the first later slot (at least
//! three rounds up) that is to-commit or undecided.
//!
//! A finalized fallback fixes slot r_fb to the selected leader block. The two
//! slots below it are settled from the decided blocks alone: at most 2f
//! vertices exist at r_fb+1, so r_fb-1 was never committed anywhere and is
//! skipped; r_fb-2 is committed iff some decided block at r_fb certifies it
//! (a direct commit puts certificates at 2f+1 creators, and every decided set
//! overlaps them in a correct node whose block sits at r_fb).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::dag::{Committee, DagStore, Digest, NodeId, Round, VertexPtr};
use crate::node::{CommitKind, Leaders};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Commit(VertexPtr),
    Skip,
    Undecided,
}

impl Status {
    pub fn is_decided(&self) -> bool {
        !matches!(self, Status::Undecided)
    }
}

type CacheKey = (usize, usize, usize);

pub struct Decider {
    committee: Committee,
    finalized: Round,
    /// Slots a fallback fixed as to-commit, with the decided blocks at
    /// that round.
    fixed: BTreeMap<Round, (VertexPtr, Vec<VertexPtr>)>,
    cache: HashMap<Round, (CacheKey, Status)>,
}

fn distinct<'a>(it: impl Iterator<Item = &'a VertexPtr>) -> usize {
    it.map(|v| v.creator()).collect::<BTreeSet<NodeId>>().len()
}

impl Decider {
    pub fn new(committee: Committee) -> Self {
        Self {
            committee,
            finalized: 0,
            fixed: BTreeMap::new(),
            cache: HashMap::new(),
        }
    }

    /// Highest slot whose decision has been acted on.
    pub fn finalized(&self) -> Round {
        self.finalized
    }

    pub fn finalize(&mut self, slot: Round) {
        self.finalized = self.finalized.max(slot);
        self.cache.retain(|r, _| *r > slot);
    }

    pub fn fix(&mut self, slot: Round, v: VertexPtr, tops: Vec<VertexPtr>) {
        self.cache.remove(&slot);
        self.fixed.insert(slot, (v, tops));
    }

    /// Slots settled by a fallback fixed one or two rounds above.
    fn below_fixed(&self, store: &DagStore, leaders: &Leaders, r: Round) -> Option<Status> {
        if self.fixed.contains_key(&(r + 1)) {
            return Some(Status::Skip);
        }
        let (_, tops) = self.fixed.get(&(r + 2))?;
        for v in store.slot_versions(r, leaders.of(r)) {
            let supp = Self::supporters(store, v);
            if tops.iter().any(|w| self.is_certificate(w, &supp, r)) {
                return Some(Status::Commit(v.clone()));
            }
        }
        Some(Status::Skip)
    }

    fn is_certificate(&self, w: &VertexPtr, supporters: &HashSet<Digest>, r: Round) -> bool {
        let creators: BTreeSet<NodeId> = w
            .references()
            .iter()
            .filter(|x| x.round == r + 1 && supporters.contains(&x.digest))
            .map(|x| x.creator)
            .collect();
        creators.len() >= self.committee.quorum()
    }

    fn supporters(store: &DagStore, v: &VertexPtr) -> HashSet<Digest> {
        let d = v.digest();
        store
            .round_vertices(v.round() + 1)
            .filter(|u| u.references_digest(&d))
            .map(|u| u.digest())
            .collect()
    }

    pub fn direct(&mut self, store: &DagStore, leaders: &Leaders, r: Round) -> Status {
        if let Some((v, _)) = self.fixed.get(&r) {
            return Status::Commit(v.clone());
        }
        let key = (
            store.round_vertices(r).count(),
            store.round_vertices(r + 1).count(),
            store.round_vertices(r + 2).count(),
        );
        if let Some((k, s)) = self.cache.get(&r) {
            if *k == key {
                return s.clone();
            }
        }
        let s = self.direct_uncached(store, leaders, r);
        self.cache.insert(r, (key, s.clone()));
        s
    }

    fn direct_uncached(&self, store: &DagStore, leaders: &Leaders, r: Round) -> Status {
        let q = self.committee.quorum();
        let versions: Vec<VertexPtr> = store.slot_versions(r, leaders.of(r)).into_iter().cloned().collect();
        for v in &versions {
            let supp = Self::supporters(store, v);
            let certs = distinct(store.round_vertices(r + 2).filter(|w| self.is_certificate(w, &supp, r)));
            if certs >= q {
                return Status::Commit(v.clone());
            }
        }
        let skipped = versions.iter().all(|v| {
            let d = v.digest();
            distinct(store.round_vertices(r + 1).filter(|u| !u.references_digest(&d))) >= q
        });
        if skipped && store.round_creators(r + 1) >= q {
            Status::Skip
        } else {
            Status::Undecided
        }
    }

    /// Round r+2 vertices in the causal history of `anchor`.
    fn history_at(store: &DagStore, anchor: &VertexPtr, target: Round) -> Vec<VertexPtr> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![anchor.clone()];
        while let Some(v) = stack.pop() {
            if v.round() == target {
                out.push(v);
                continue;
            }
            for x in v.references() {
                if x.round >= target && seen.insert(x.digest) {
                    if let Some(p) = store.get(&x.digest) {
                        stack.push(p.clone());
                    }
                }
            }
        }
        out
    }

    fn indirect(&self, store: &DagStore, leaders: &Leaders, r: Round, anchor: &VertexPtr) -> Status {
        let hist = Self::history_at(store, anchor, r + 2);
        for v in store.slot_versions(r, leaders.of(r)) {
            let supp = Self::supporters(store, v);
            if hist.iter().any(|w| self.is_certificate(w, &supp, r)) {
                return Status::Commit(v.clone());
            }
        }
        Status::Skip
    }

    /// Status of every slot above the finalized one, lowest first.
    pub fn statuses(&mut self, store: &DagStore, leaders: &Leaders) -> Vec<(Round, Status, CommitKind)> {
        let top = store.highest_round().max(self.fixed.keys().next_back().copied().unwrap_or(0));
        let mut seq: BTreeMap<Round, (Status, CommitKind)> = BTreeMap::new();
        for r in (self.finalized + 1..=top).rev() {
            if !self.fixed.contains_key(&r) {
                if let Some(s) = self.below_fixed(store, leaders, r) {
                    seq.insert(r, (s, CommitKind::Fallback));
                    continue;
                }
            }
            let kind = if self.fixed.contains_key(&r) {
                CommitKind::Fallback
            } else {
                CommitKind::Direct
            };
            let s = self.direct(store, leaders, r);
            if s.is_decided() {
                seq.insert(r, (s, kind));
                continue;
            }
            let anchor = seq
                .range(r + 3..)
                .find(|(_, (s, _))| !matches!(s, Status::Skip))
                .map(|(_, (s, _))| s.clone());
            let s = match anchor {
                Some(Status::Commit(a)) => self.indirect(store, leaders, r, &a),
                _ => Status::Undecided,
            };
            seq.insert(r, (s, CommitKind::Indirect));
        }
        seq.into_iter().map(|(r, (s, k))| (r, s, k)).collect()
    }

    /// The longest decided prefix above the finalized slot.
    pub fn decide(&mut self, store: &DagStore, leaders: &Leaders) -> Vec<(Round, Status, CommitKind)> {
        self.statuses(store, leaders)
            .into_iter()
            .take_while(|(_, s, _)| s.is_decided())
            .collect()
    }
}
