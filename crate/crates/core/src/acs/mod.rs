//! Agreement on a common subset: n reliable broadcasts plus n binary
//! agreements (the BKR composition).
//!
//! Every correct node outputs the same set of at least `n - f` proposals.
//! Proposal validity is the host's business; it is passed in as a predicate
//! so the instance itself never looks inside a proposal.

mod aba;

use std::collections::{BTreeMap, BTreeSet};

pub use aba::{Aba, AbaMessage, CommonCoin};

use crate::dag::{Committee, Digest, NodeId};
use crate::rbc::{Rbc, RbcEvent, RbcKey, RbcMessage, RbcPayload, Validity};

/// RBC instance of one proposer inside one ACS view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AcsSlot {
    pub view: u64,
    pub slot: NodeId,
}

impl RbcKey for AcsSlot {
    fn sender(&self) -> NodeId {
        self.slot
    }
}

#[derive(Clone, Debug)]
pub enum AcsMessage<P> {
    Rbc(RbcMessage<AcsSlot, P>),
    Aba { view: u64, slot: NodeId, msg: AbaMessage },
}

impl<P> AcsMessage<P> {
    pub fn view(&self) -> u64 {
        match self {
            AcsMessage::Rbc(m) => m.id().view,
            AcsMessage::Aba { view, .. } => *view,
        }
    }
}

/// Fixed per-message bookkeeping cost charged to the fallback budget.
pub const ACS_MSG_OVERHEAD: u64 = 48;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AcsError {
    #[error("proposal rejected before entering ACS")]
    InvalidProposal,
    #[error("already proposed in view {0}")]
    AlreadyProposed(u64),
}

pub struct AcsOutput<P> {
    pub broadcasts: Vec<AcsMessage<P>>,
    /// Set exactly once, in slot order.
    pub decided: Option<Vec<(NodeId, P)>>,
}

impl<P> Default for AcsOutput<P> {
    fn default() -> Self {
        Self {
            broadcasts: Vec::new(),
            decided: None,
        }
    }
}

/// One ACS view at one node.
pub struct AcsInstance<P> {
    committee: Committee,
    me: NodeId,
    view: u64,
    rbc: Rbc<AcsSlot, P>,
    abas: Vec<Aba>,
    delivered: BTreeMap<NodeId, P>,
    ones: usize,
    retained: BTreeSet<Digest>,
    proposed: bool,
    decided: bool,
    /// Bytes this instance has kept in memory so far.
    footprint: u64,
}

impl<P: RbcPayload> AcsInstance<P> {
    pub fn new(committee: Committee, me: NodeId, view: u64, coin: CommonCoin) -> Self {
        Self {
            committee,
            me,
            view,
            rbc: Rbc::new(committee, me),
            abas: committee.nodes().map(|s| Aba::new(committee, coin, view, s)).collect(),
            delivered: BTreeMap::new(),
            ones: 0,
            retained: BTreeSet::new(),
            proposed: false,
            decided: false,
            footprint: 0,
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn is_decided(&self) -> bool {
        self.decided
    }

    pub fn footprint(&self) -> u64 {
        self.footprint
    }

    /// Highest ABA round any slot needed.
    pub fn max_aba_rounds(&self) -> u32 {
        self.abas.iter().map(|a| a.rounds_used()).max().unwrap_or(0)
    }

    /// Has every binary agreement seen a quorum of TERMs?
    pub fn is_quiescent(&self) -> bool {
        self.abas.iter().all(|a| a.terminated())
    }

    /// Broadcast our proposal. `valid` is the host's entry check.
    pub fn propose(&mut self, proposal: P, valid: bool) -> Result<AcsOutput<P>, AcsError> {
        if !valid {
            return Err(AcsError::InvalidProposal);
        }
        if self.proposed {
            return Err(AcsError::AlreadyProposed(self.view));
        }
        self.proposed = true;
        let id = AcsSlot {
            view: self.view,
            slot: self.me,
        };
        let out = self.rbc.broadcast(id, proposal).expect("own slot, first broadcast");
        Ok(AcsOutput {
            broadcasts: out.broadcasts.into_iter().map(AcsMessage::Rbc).collect(),
            decided: None,
        })
    }

    /// `payload_size` gives the in-memory size of a proposal for accounting.
    pub fn handle(
        &mut self,
        from: NodeId,
        msg: AcsMessage<P>,
        valid: impl Fn(NodeId, &P) -> bool,
        payload_size: impl Fn(&P) -> u64,
    ) -> AcsOutput<P> {
        let mut out = AcsOutput::default();
        if msg.view() != self.view {
            return out;
        }
        self.footprint += ACS_MSG_OVERHEAD;
        match msg {
            AcsMessage::Rbc(m) => {
                let id = m.id();
                if let RbcMessage::Propose { payload, .. } | RbcMessage::Echo { payload, .. } = &m {
                    // only the first copy of each slot's payload is retained
                    if !self.rbc.is_delivered(&id) && self.retained.insert(payload.payload_digest()) {
                        self.footprint += payload_size(payload);
                    }
                }
                let slot = id.slot;
                let r = self.rbc.handle(from, m, |p| {
                    if valid(slot, p) {
                        Validity::Valid
                    } else {
                        Validity::Invalid
                    }
                });
                out.broadcasts.extend(r.broadcasts.into_iter().map(AcsMessage::Rbc));
                for ev in r.events {
                    if let RbcEvent::Delivered { id, payload } = ev {
                        if !valid(id.slot, &payload) {
                            continue;
                        }
                        self.delivered.insert(id.slot, payload);
                        let a = &mut self.abas[id.slot.index()];
                        if !a.has_input() {
                            let msgs = a.input(true);
                            self.push_aba(id.slot, msgs, &mut out);
                        }
                    }
                }
            }
            AcsMessage::Aba { slot, msg, .. } => {
                if !self.committee.contains(slot) {
                    return out;
                }
                let msgs = self.abas[slot.index()].handle(from, msg);
                self.push_aba(slot, msgs, &mut out);
            }
        }
        self.progress(&mut out);
        out
    }

    fn push_aba(&mut self, slot: NodeId, msgs: Vec<AbaMessage>, out: &mut AcsOutput<P>) {
        out.broadcasts.extend(msgs.into_iter().map(|msg| AcsMessage::Aba {
            view: self.view,
            slot,
            msg,
        }));
    }

    fn progress(&mut self, out: &mut AcsOutput<P>) {
        self.ones = self.abas.iter().filter(|a| a.decided() == Some(true)).count();
        if self.ones >= self.committee.quorum() {
            for s in 0..self.abas.len() {
                if !self.abas[s].has_input() && self.abas[s].decided().is_none() {
                    let msgs = self.abas[s].input(false);
                    self.push_aba(NodeId(s as u32), msgs, out);
                }
            }
        }
        if self.decided || self.abas.iter().any(|a| a.decided().is_none()) {
            return;
        }
        let chosen: Vec<NodeId> = self
            .abas
            .iter()
            .enumerate()
            .filter(|(_, a)| a.decided() == Some(true))
            .map(|(i, _)| NodeId(i as u32))
            .collect();
        if chosen.iter().all(|s| self.delivered.contains_key(s)) {
            self.decided = true;
            out.decided = Some(chosen.into_iter().map(|s| (s, self.delivered[&s].clone())).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone, Debug, PartialEq)]
    struct Prop(u8, bool);
    impl RbcPayload for Prop {
        fn payload_digest(&self) -> Digest {
            Digest([self.0; 32])
        }
    }

    type Decisions = Vec<Option<Vec<(NodeId, Prop)>>>;

    fn simulate(n: usize, silent: &[usize], seed: u64) -> Decisions {
        let c = Committee::with_max_faults(n).unwrap();
        let coin = CommonCoin { seed };
        let mut nodes: Vec<AcsInstance<Prop>> = (0..n).map(|i| AcsInstance::new(c, NodeId(i as u32), 7, coin)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = Vec::new();
        for i in (0..n).filter(|i| !silent.contains(i)) {
            let out = nodes[i].propose(Prop(i as u8 + 1, true), true).unwrap();
            for m in out.broadcasts {
                for t in 0..n {
                    pool.push((i, t, m.clone()));
                }
            }
        }
        let mut decided = vec![None; n];
        while !pool.is_empty() {
            let k = rng.gen_range(0..pool.len());
            let (from, to, m) = pool.swap_remove(k);
            if silent.contains(&to) {
                continue;
            }
            let out = nodes[to].handle(NodeId(from as u32), m, |_, p| p.1, |_| 100);
            if let Some(v) = out.decided {
                assert!(decided[to].is_none());
                decided[to] = Some(v);
            }
            for b in out.broadcasts {
                for t in 0..n {
                    pool.push((to, t, b.clone()));
                }
            }
        }
        decided
    }

    #[test]
    fn all_honest_decide_same_large_set() {
        for seed in 0..100 {
            let d = simulate(4, &[], seed);
            let first = d[0].clone().expect("decided");
            assert!((3..=4).contains(&first.len()), "seed {seed}");
            assert!(d.iter().all(|x| x.as_ref() == Some(&first)));
        }
    }

    #[test]
    fn one_silent_node_yields_three() {
        for seed in 0..30 {
            let d = simulate(4, &[2], seed);
            let first = d[0].clone().expect("decided");
            assert_eq!(first.len(), 3, "seed {seed}");
            assert!(first.iter().all(|(s, _)| s.0 != 2));
            for i in [1, 3] {
                assert_eq!(d[i].as_ref(), Some(&first));
            }
        }
    }

    #[test]
    fn invalid_proposal_rejected_at_entry() {
        let c = Committee::new(4, 1).unwrap();
        let mut a: AcsInstance<Prop> = AcsInstance::new(c, NodeId(0), 0, CommonCoin { seed: 1 });
        assert_eq!(a.propose(Prop(1, false), false).err(), Some(AcsError::InvalidProposal));
    }

    #[test]
    fn other_view_messages_ignored() {
        let c = Committee::new(4, 1).unwrap();
        let mut a: AcsInstance<Prop> = AcsInstance::new(c, NodeId(0), 3, CommonCoin { seed: 1 });
        let m = AcsMessage::Rbc(RbcMessage::Propose {
            id: AcsSlot { view: 4, slot: NodeId(1) },
            payload: Prop(1, true),
        });
        let out = a.handle(NodeId(1), m, |_, _| true, |_| 1);
        assert!(out.broadcasts.is_empty());
        assert_eq!(a.footprint(), 0);
    }
}
