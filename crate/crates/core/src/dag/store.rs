use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use super::committee::{Committee, NodeId, Round};
use super::vertex::{Digest, Vertex, VertexPtr, VertexRef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InsertError {
    #[error("{got} references, need {need}")]
    InsufficientReferences { got: usize, need: usize },
    #[error("equivocation: {existing:?} already holds this slot")]
    Equivocation { existing: VertexRef },
    #[error("malformed vertex: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("causal history incomplete, {} ancestors absent", .0.len())]
pub struct MissingHistory(pub Vec<VertexRef>);

/// Result of a successful insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inserted {
    /// Vertices whose full history became available, the new one included
    /// if it connected, in a valid topological order.
    pub connected: Vec<VertexPtr>,
    /// Parents of the new vertex that are not stored at all.
    pub missing: Vec<VertexRef>,
    pub duplicate: bool,
}

/// Per-node DAG.
///
/// Vertices whose ancestors are all present are *connected*; the rest are
/// held with their missing parents tracked and connect automatically once
/// those arrive. Every query that interprets the DAG (counts, patterns,
/// histories) only sees connected vertices.
#[derive(Debug, Clone)]
pub struct DagStore {
    committee: Committee,
    vertices: HashMap<Digest, VertexPtr>,
    connected: HashSet<Digest>,
    slots: HashMap<(Round, NodeId), Digest>,
    rounds: BTreeMap<Round, BTreeSet<(NodeId, Digest)>>,
    latest: HashMap<NodeId, Round>,
    waiting_on: HashMap<Digest, Vec<Digest>>,
    blocked: HashMap<Digest, usize>,
    ordered: HashSet<Digest>,
    uncommitted_bytes: u64,
    equivocators: BTreeSet<NodeId>,
    highest_connected: Round,
    epoch: u64,
}

impl DagStore {
    pub fn new(committee: Committee) -> Self {
        Self {
            committee,
            vertices: HashMap::new(),
            connected: HashSet::new(),
            slots: HashMap::new(),
            rounds: BTreeMap::new(),
            latest: HashMap::new(),
            waiting_on: HashMap::new(),
            blocked: HashMap::new(),
            ordered: HashSet::new(),
            uncommitted_bytes: 0,
            equivocators: BTreeSet::new(),
            highest_connected: 0,
            epoch: 0,
        }
    }

    /// Store with one genesis vertex per node already connected.
    pub fn with_genesis(committee: Committee) -> Self {
        let mut s = Self::new(committee);
        for n in committee.nodes() {
            s.insert_vertex(std::sync::Arc::new(Vertex::genesis(n)))
                .expect("genesis is well formed");
        }
        s
    }

    pub fn committee(&self) -> Committee {
        self.committee
    }

    fn check_structure(&self, v: &Vertex) -> Result<(), InsertError> {
        if v.round() == 0 {
            return Err(InsertError::Malformed("round 0"));
        }
        if !self.committee.contains(v.creator()) {
            return Err(InsertError::Malformed("unknown creator"));
        }
        if v.round() == 1 {
            return if v.references().is_empty() {
                Ok(())
            } else {
                Err(InsertError::Malformed("genesis with references"))
            };
        }
        let need = self.committee.quorum();
        if v.references().len() < need {
            return Err(InsertError::InsufficientReferences {
                got: v.references().len(),
                need,
            });
        }
        let mut slots = HashSet::new();
        for r in v.references() {
            if r.round >= v.round() {
                return Err(InsertError::Malformed("reference not to an earlier round"));
            }
            if !self.committee.contains(r.creator) {
                return Err(InsertError::Malformed("reference to unknown creator"));
            }
            if !slots.insert((r.round, r.creator)) {
                return Err(InsertError::Malformed("two references into one slot"));
            }
        }
        Ok(())
    }

    /// Accept `v` if well formed and not conflicting with an earlier vertex
    /// of the same `(round, creator)`.
    pub fn insert_vertex(&mut self, v: VertexPtr) -> Result<Inserted, InsertError> {
        if self.vertices.contains_key(&v.digest()) {
            return Ok(Inserted {
                duplicate: true,
                ..Default::default()
            });
        }
        self.check_structure(&v)?;
        if let Some(existing) = self.slots.get(&(v.round(), v.creator())) {
            self.equivocators.insert(v.creator());
            let existing = self.vertices[existing].reference();
            return Err(InsertError::Equivocation { existing });
        }
        self.slots.insert((v.round(), v.creator()), v.digest());
        Ok(self.admit(v))
    }

    /// Keep a conflicting version as evidence. It can resolve other
    /// vertices' references and shows up in round scans, but never takes the
    /// `(round, creator)` slot.
    pub fn insert_evidence(&mut self, v: VertexPtr) -> Result<Inserted, InsertError> {
        if self.vertices.contains_key(&v.digest()) {
            return Ok(Inserted {
                duplicate: true,
                ..Default::default()
            });
        }
        self.check_structure(&v)?;
        self.equivocators.insert(v.creator());
        self.slots.entry((v.round(), v.creator())).or_insert(v.digest());
        Ok(self.admit(v))
    }

    fn admit(&mut self, v: VertexPtr) -> Inserted {
        self.epoch += 1;
        let d = v.digest();
        let latest = self.latest.entry(v.creator()).or_insert(0);
        *latest = (*latest).max(v.round());
        self.uncommitted_bytes += v.size() as u64;
        let mut missing = Vec::new();
        let mut unconnected = 0;
        for r in v.references() {
            if !self.connected.contains(&r.digest) {
                unconnected += 1;
                self.waiting_on.entry(r.digest).or_default().push(d);
                if !self.vertices.contains_key(&r.digest) {
                    missing.push(*r);
                }
            }
        }
        self.vertices.insert(d, v);
        let connected = if unconnected == 0 {
            self.connect(d)
        } else {
            self.blocked.insert(d, unconnected);
            Vec::new()
        };
        Inserted {
            connected,
            missing,
            duplicate: false,
        }
    }

    fn connect(&mut self, root: Digest) -> Vec<VertexPtr> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(d) = stack.pop() {
            let v = self.vertices[&d].clone();
            self.connected.insert(d);
            self.rounds
                .entry(v.round())
                .or_default()
                .insert((v.creator(), d));
            self.highest_connected = self.highest_connected.max(v.round());
            if let Some(children) = self.waiting_on.remove(&d) {
                for c in children.into_iter().rev() {
                    let left = self.blocked.get_mut(&c).expect("waiting child is blocked");
                    *left -= 1;
                    if *left == 0 {
                        self.blocked.remove(&c);
                        stack.push(c);
                    }
                }
            }
            out.push(v);
        }
        out
    }

    pub fn get(&self, d: &Digest) -> Option<&VertexPtr> {
        self.vertices.get(d)
    }

    pub fn contains(&self, d: &Digest) -> bool {
        self.vertices.contains_key(d)
    }

    pub fn is_connected(&self, d: &Digest) -> bool {
        self.connected.contains(d)
    }

    /// First vertex stored for `(round, creator)`, connected or not.
    pub fn slot(&self, round: Round, creator: NodeId) -> Option<&VertexPtr> {
        self.slots.get(&(round, creator)).map(|d| &self.vertices[d])
    }

    /// The slot's vertex, if its history is complete.
    pub fn connected_slot(&self, round: Round, creator: NodeId) -> Option<&VertexPtr> {
        self.slots
            .get(&(round, creator))
            .filter(|d| self.connected.contains(d))
            .map(|d| &self.vertices[d])
    }

    /// Every connected version for `(round, creator)`, evidence included.
    pub fn slot_versions(&self, round: Round, creator: NodeId) -> Vec<&VertexPtr> {
        self.round_vertices(round)
            .filter(|v| v.creator() == creator)
            .collect()
    }

    /// Connected vertices of `round`, ordered by `(creator, digest)`.
    pub fn round_vertices(&self, round: Round) -> impl Iterator<Item = &VertexPtr> + '_ {
        self.rounds
            .get(&round)
            .into_iter()
            .flat_map(|s| s.iter())
            .map(|(_, d)| &self.vertices[d])
    }

    /// Connected primary (slot-holding) vertices of `round`.
    pub fn round_primaries(&self, round: Round) -> Vec<VertexPtr> {
        self.round_vertices(round)
            .filter(|v| self.slots.get(&(round, v.creator())) == Some(&v.digest()))
            .cloned()
            .collect()
    }

    /// Number of distinct creators with a connected vertex in `round`.
    pub fn round_creators(&self, round: Round) -> usize {
        let Some(s) = self.rounds.get(&round) else {
            return 0;
        };
        let mut last = None;
        let mut n = 0;
        for (c, _) in s {
            if last != Some(*c) {
                n += 1;
                last = Some(*c);
            }
        }
        n
    }

    /// Bumped by every insertion; equal epochs mean an unchanged store.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn highest_round(&self) -> Round {
        self.highest_connected
    }

    /// Highest round of any stored vertex by `creator`.
    pub fn latest_round_of(&self, creator: NodeId) -> Option<Round> {
        self.latest.get(&creator).copied()
    }

    /// Rounds holding at least one connected vertex, descending from `from`.
    pub fn rounds_desc(&self, from: Round) -> impl Iterator<Item = Round> + '_ {
        self.rounds.range(..=from).rev().map(|(r, _)| *r)
    }

    /// Directed reference chain `from -> ... -> to` in the local DAG.
    pub fn path_exists(&self, from: &VertexRef, to: &VertexRef) -> bool {
        if from.digest == to.digest {
            return true;
        }
        match self.vertices.get(&from.digest) {
            Some(v) => self.reaches(v, to),
            None => false,
        }
    }

    /// Like [`path_exists`](Self::path_exists) but starting from a vertex
    /// that may not be stored (e.g. an RBC proposal not yet delivered).
    pub fn reaches(&self, from: &Vertex, to: &VertexRef) -> bool {
        if from.digest() == to.digest {
            return true;
        }
        if from.round() <= to.round {
            return false;
        }
        let mut seen = HashSet::new();
        let mut stack: Vec<&Vertex> = vec![from];
        while let Some(v) = stack.pop() {
            for r in v.references() {
                if r.digest == to.digest {
                    return true;
                }
                if r.round > to.round && seen.insert(r.digest) {
                    if let Some(p) = self.vertices.get(&r.digest) {
                        stack.push(p);
                    }
                }
            }
        }
        false
    }

    /// Ancestors of `d` (itself included) not yet ordered, sorted by
    /// `(round, creator, digest)`.
    pub fn causal_history(&self, d: &Digest) -> Result<Vec<VertexPtr>, MissingHistory> {
        let Some(root) = self.vertices.get(d) else {
            return Err(MissingHistory(Vec::new()));
        };
        if self.ordered.contains(d) {
            return Ok(Vec::new());
        }
        let mut out = vec![root.clone()];
        let mut missing = Vec::new();
        let mut seen = HashSet::from([*d]);
        let mut i = 0;
        while i < out.len() {
            let v = out[i].clone();
            i += 1;
            for r in v.references() {
                if self.ordered.contains(&r.digest) || !seen.insert(r.digest) {
                    continue;
                }
                match self.vertices.get(&r.digest) {
                    Some(p) => out.push(p.clone()),
                    None => missing.push(*r),
                }
            }
        }
        if !missing.is_empty() {
            missing.sort();
            return Err(MissingHistory(missing));
        }
        out.sort_by_key(|v| (v.round(), v.creator(), v.digest()));
        Ok(out)
    }

    /// Mark as ordered; returns the bytes released, or `None` if the vertex
    /// is unknown or was already ordered.
    pub fn mark_ordered(&mut self, d: &Digest) -> Option<usize> {
        let v = self.vertices.get(d)?;
        if !self.ordered.insert(*d) {
            return None;
        }
        let size = v.size();
        self.uncommitted_bytes -= size as u64;
        Some(size)
    }

    pub fn is_ordered(&self, d: &Digest) -> bool {
        self.ordered.contains(d)
    }

    pub fn uncommitted_bytes(&self) -> u64 {
        self.uncommitted_bytes
    }

    pub fn equivocators(&self) -> &BTreeSet<NodeId> {
        &self.equivocators
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Vertices stored but still waiting on ancestors.
    pub fn pending(&self) -> usize {
        self.blocked.len()
    }

    /// Absent ancestors blocking `d` from connecting.
    pub fn absent_ancestors(&self, d: &Digest) -> Vec<VertexRef> {
        self.absent_ancestors_of([*d])
    }

    /// Union of the absent ancestors of several vertices, in one walk.
    pub fn absent_ancestors_of(&self, roots: impl IntoIterator<Item = Digest>) -> Vec<VertexRef> {
        let mut out = BTreeSet::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<Digest> = roots.into_iter().collect();
        while let Some(x) = stack.pop() {
            if self.connected.contains(&x) || !seen.insert(x) {
                continue;
            }
            if let Some(v) = self.vertices.get(&x) {
                for r in v.references() {
                    if !self.vertices.contains_key(&r.digest) {
                        out.insert(*r);
                    } else {
                        stack.push(r.digest);
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    /// All stored vertices in `(round, creator, digest)` order.
    pub fn all_vertices(&self) -> Vec<VertexPtr> {
        let mut v: Vec<_> = self.vertices.values().cloned().collect();
        v.sort_by_key(|v| (v.round(), v.creator(), v.digest()));
        v
    }
}
