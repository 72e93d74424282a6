//! Bracha reliable broadcast, generic over the payload.
//!
//! Echoes carry the payload so that any node collecting a ready quorum can
//! always recover it; readies carry only the digest.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::dag::{Committee, Digest, NodeId, VertexPtr};

/// Identifies an instance and its designated sender.
pub trait RbcKey: Copy + Ord + std::fmt::Debug {
    fn sender(&self) -> NodeId;
}

pub trait RbcPayload: Clone {
    fn payload_digest(&self) -> Digest;
}

impl RbcPayload for VertexPtr {
    fn payload_digest(&self) -> Digest {
        self.digest()
    }
}

#[derive(Clone, Debug)]
pub enum RbcMessage<K, P> {
    Propose { id: K, payload: P },
    Echo { id: K, payload: P },
    Ready { id: K, digest: Digest },
}

impl<K: Copy, P> RbcMessage<K, P> {
    pub fn id(&self) -> K {
        match self {
            RbcMessage::Propose { id, .. } | RbcMessage::Echo { id, .. } | RbcMessage::Ready { id, .. } => *id,
        }
    }
}

#[derive(Clone, Debug)]
pub enum RbcEvent<K, P> {
    /// The sender's proposal arrived and passed validation.
    FirstMessage { id: K, payload: P },
    Delivered { id: K, payload: P },
}

/// Verdict of the host's validity predicate on a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid,
    /// Not decidable yet; the host calls [`Rbc::revalidate`] later.
    Defer,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RbcError {
    #[error("{me} is not the sender of {id}")]
    NotSender { me: NodeId, id: String },
    #[error("instance {0} already broadcast")]
    Duplicate(String),
}

struct Instance<P> {
    payloads: HashMap<Digest, P>,
    echoes: HashMap<Digest, usize>,
    readies: HashMap<Digest, usize>,
    echo_from: BTreeSet<NodeId>,
    ready_from: BTreeSet<NodeId>,
    sent: bool,
    proposed: bool,
    deferred: Option<P>,
    echoed: bool,
    readied: bool,
    delivered: bool,
}

impl<P> Default for Instance<P> {
    fn default() -> Self {
        Self {
            payloads: HashMap::new(),
            echoes: HashMap::new(),
            readies: HashMap::new(),
            echo_from: BTreeSet::new(),
            ready_from: BTreeSet::new(),
            sent: false,
            proposed: false,
            deferred: None,
            echoed: false,
            readied: false,
            delivered: false,
        }
    }
}

/// Output of one handler call: messages to broadcast (self included) and
/// events for the host.
pub struct RbcOutput<K, P> {
    pub broadcasts: Vec<RbcMessage<K, P>>,
    pub events: Vec<RbcEvent<K, P>>,
}

impl<K, P> Default for RbcOutput<K, P> {
    fn default() -> Self {
        Self {
            broadcasts: Vec::new(),
            events: Vec::new(),
        }
    }
}

/// All RBC instances hosted by one node.
pub struct Rbc<K, P> {
    committee: Committee,
    me: NodeId,
    instances: BTreeMap<K, Instance<P>>,
    malformed: u64,
}

impl<K: RbcKey, P: RbcPayload> Rbc<K, P> {
    pub fn new(committee: Committee, me: NodeId) -> Self {
        Self {
            committee,
            me,
            instances: BTreeMap::new(),
            malformed: 0,
        }
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    pub fn is_delivered(&self, id: &K) -> bool {
        self.instances.get(id).is_some_and(|i| i.delivered)
    }

    pub fn has_proposal(&self, id: &K) -> bool {
        self.instances.get(id).is_some_and(|i| i.proposed)
    }

    /// Deferred proposals, oldest instance first.
    pub fn deferred(&self) -> Vec<(K, P)> {
        self.instances
            .iter()
            .filter_map(|(k, i)| i.deferred.clone().map(|p| (*k, p)))
            .collect()
    }

    pub fn broadcast(&mut self, id: K, payload: P) -> Result<RbcOutput<K, P>, RbcError> {
        if id.sender() != self.me {
            return Err(RbcError::NotSender {
                me: self.me,
                id: format!("{id:?}"),
            });
        }
        let inst = self.instances.entry(id).or_default();
        if inst.sent {
            return Err(RbcError::Duplicate(format!("{id:?}")));
        }
        inst.sent = true;
        let mut out = RbcOutput::default();
        out.broadcasts.push(RbcMessage::Propose { id, payload });
        Ok(out)
    }

    /// Drop per-instance bookkeeping for every instance with `keep(id)` false.
    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool) {
        self.instances.retain(|k, _| keep(k));
    }

    pub fn handle(
        &mut self,
        from: NodeId,
        msg: RbcMessage<K, P>,
        validate: impl FnOnce(&P) -> Validity,
    ) -> RbcOutput<K, P> {
        let mut out = RbcOutput::default();
        let id = msg.id();
        if !self.committee.contains(from) || !self.committee.contains(id.sender()) {
            self.malformed += 1;
            return out;
        }
        match msg {
            RbcMessage::Propose { payload, .. } => {
                if from != id.sender() {
                    self.malformed += 1;
                    return out;
                }
                let inst = self.instances.entry(id).or_default();
                if inst.proposed || inst.delivered {
                    return out;
                }
                inst.proposed = true;
                match validate(&payload) {
                    Validity::Valid => self.accept_proposal(id, payload, &mut out),
                    Validity::Invalid => self.malformed += 1,
                    Validity::Defer => {
                        let inst = self.instances.get_mut(&id).expect("present");
                        inst.deferred = Some(payload);
                    }
                }
            }
            RbcMessage::Echo { payload, .. } => {
                let q = self.committee.quorum();
                let inst = self.instances.entry(id).or_default();
                if inst.delivered || !inst.echo_from.insert(from) {
                    return out;
                }
                let d = payload.payload_digest();
                inst.payloads.entry(d).or_insert(payload);
                let c = inst.echoes.entry(d).or_default();
                *c += 1;
                if *c >= q && !inst.readied {
                    inst.readied = true;
                    out.broadcasts.push(RbcMessage::Ready { id, digest: d });
                }
                self.try_deliver(id, &mut out);
            }
            RbcMessage::Ready { digest, .. } => {
                let v = self.committee.validity();
                let inst = self.instances.entry(id).or_default();
                if inst.delivered || !inst.ready_from.insert(from) {
                    return out;
                }
                let c = inst.readies.entry(digest).or_default();
                *c += 1;
                if *c >= v && !inst.readied {
                    inst.readied = true;
                    out.broadcasts.push(RbcMessage::Ready { id, digest });
                }
                self.try_deliver(id, &mut out);
            }
        }
        out
    }

    /// Re-run validation on a deferred proposal.
    pub fn revalidate(&mut self, id: K, validate: impl FnOnce(&P) -> Validity) -> RbcOutput<K, P> {
        let mut out = RbcOutput::default();
        let Some(inst) = self.instances.get_mut(&id) else {
            return out;
        };
        let Some(p) = inst.deferred.take() else {
            return out;
        };
        match validate(&p) {
            Validity::Valid => self.accept_proposal(id, p, &mut out),
            Validity::Invalid => self.malformed += 1,
            Validity::Defer => self.instances.get_mut(&id).expect("present").deferred = Some(p),
        }
        out
    }

    fn accept_proposal(&mut self, id: K, payload: P, out: &mut RbcOutput<K, P>) {
        let inst = self.instances.get_mut(&id).expect("present");
        inst.deferred = None;
        out.events.push(RbcEvent::FirstMessage {
            id,
            payload: payload.clone(),
        });
        if !inst.echoed && !inst.delivered {
            inst.echoed = true;
            inst.payloads.entry(payload.payload_digest()).or_insert(payload.clone());
            out.broadcasts.push(RbcMessage::Echo { id, payload });
        }
    }

    fn try_deliver(&mut self, id: K, out: &mut RbcOutput<K, P>) {
        let q = self.committee.quorum();
        let inst = self.instances.get_mut(&id).expect("present");
        if inst.delivered {
            return;
        }
        let Some((&d, _)) = inst.readies.iter().find(|(_, &c)| c >= q) else {
            return;
        };
        let Some(p) = inst.payloads.get(&d).cloned() else {
            return;
        };
        inst.delivered = true;
        // only the flags matter from here on
        inst.payloads.clear();
        inst.echoes.clear();
        inst.readies.clear();
        inst.echo_from.clear();
        inst.ready_from.clear();
        inst.deferred = None;
        out.events.push(RbcEvent::Delivered { id, payload: p });
    }
}
