use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Protocol round number. Genesis vertices live in round 1.
pub type Round = u64;

/// Index of a node in the committee, in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitteeError {
    #[error("committee needs at least one node")]
    Empty,
    #[error("n = {n} cannot tolerate f = {f} Byzantine nodes (need n >= 3f+1)")]
    TooManyFaults { n: usize, f: usize },
}

/// Static membership plus the quorum arithmetic every protocol layer shares.
///
/// Quorums are `n - f`, which is exactly `2f + 1` when `n = 3f + 1` and stays
/// intersection-safe for larger `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committee {
    n: usize,
    f: usize,
}

impl Committee {
    pub fn new(n: usize, f: usize) -> Result<Self, CommitteeError> {
        if n == 0 {
            return Err(CommitteeError::Empty);
        }
        if n < 3 * f + 1 {
            return Err(CommitteeError::TooManyFaults { n, f });
        }
        Ok(Self { n, f })
    }

    /// Largest tolerable `f` for `n` nodes.
    pub fn with_max_faults(n: usize) -> Result<Self, CommitteeError> {
        Self::new(n, n.saturating_sub(1) / 3)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        self.f
    }

    /// Dissemination and committing quorum.
    pub fn quorum(&self) -> usize {
        self.n - self.f
    }

    /// Smallest set guaranteed to contain a correct node.
    pub fn validity(&self) -> usize {
        self.f + 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + Clone {
        (0..self.n as u32).map(NodeId)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.n
    }

    /// Predefined leader of `round`, round-robin.
    pub fn leader(&self, round: Round) -> NodeId {
        NodeId((round % self.n as u64) as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_is_two_f_plus_one_for_tight_committees() {
        for f in 0..6 {
            let c = Committee::new(3 * f + 1, f).unwrap();
            assert_eq!(c.quorum(), 2 * f + 1);
        }
    }

    #[test]
    fn rejects_overfull_fault_budget() {
        assert!(matches!(
            Committee::new(6, 2),
            Err(CommitteeError::TooManyFaults { .. })
        ));
        assert!(Committee::new(0, 0).is_err());
    }

    #[test]
    fn loose_committee_uses_n_minus_f() {
        let c = Committee::with_max_faults(20).unwrap();
        assert_eq!(c.f(), 6);
        assert_eq!(c.quorum(), 14);
        // two quorums always share a correct node
        assert!(2 * c.quorum() - c.n() > c.f());
    }

    #[test]
    fn leaders_rotate() {
        let c = Committee::new(4, 1).unwrap();
        let ls: Vec<_> = (1..=5).map(|r| c.leader(r).0).collect();
        assert_eq!(ls, vec![1, 2, 3, 0, 1]);
    }
}
