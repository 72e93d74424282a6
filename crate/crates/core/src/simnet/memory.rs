use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::NodeId;

/// Which budget a charge draws on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsgClass {
    /// Vertices and everything that disseminates or fetches them.
    Dag,
    /// PoST blocks, their votes, and ACS traffic; paid from the reserve.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{class:?} budget exhausted")]
pub struct Exhausted {
    pub class: MsgClass,
}

/// One node's memory budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryAccount {
    pub limit: u64,
    pub reserve: u64,
    pub used: u64,
    pub fallback_used: u64,
    pub fallback_peak: u64,
    /// Sticky: set the first time `used` reaches `limit`.
    pub ever_exhausted: bool,
}

impl MemoryAccount {
    pub fn new(limit: u64, reserve: u64) -> Self {
        Self {
            limit,
            reserve,
            used: 0,
            fallback_used: 0,
            fallback_peak: 0,
            ever_exhausted: false,
        }
    }

    /// An exhausted node neither accepts nor creates DAG messages.
    pub fn is_exhausted(&self) -> bool {
        self.used >= self.limit
    }

    /// Whether `bytes` more of `class` fit without exhausting that budget.
    pub fn fits(&self, bytes: u64, class: MsgClass) -> bool {
        match class {
            MsgClass::Dag => self.used + bytes < self.limit,
            MsgClass::Fallback => self.fallback_used + bytes <= self.reserve,
        }
    }

    pub fn charge(&mut self, bytes: u64, class: MsgClass) -> Result<(), Exhausted> {
        match class {
            MsgClass::Dag => {
                if self.is_exhausted() {
                    return Err(Exhausted { class });
                }
                self.used += bytes;
                if self.is_exhausted() {
                    self.ever_exhausted = true;
                }
            }
            MsgClass::Fallback => {
                if self.fallback_used + bytes > self.reserve {
                    return Err(Exhausted { class });
                }
                self.fallback_used += bytes;
                self.fallback_peak = self.fallback_peak.max(self.fallback_used);
            }
        }
        Ok(())
    }

    pub fn refund(&mut self, bytes: u64, class: MsgClass) {
        match class {
            MsgClass::Dag => self.used = self.used.saturating_sub(bytes),
            MsgClass::Fallback => self.fallback_used = self.fallback_used.saturating_sub(bytes),
        }
    }
}

/// Budgets for every node of a run.
#[derive(Debug, Clone)]
pub struct MemoryMeter {
    accounts: Vec<MemoryAccount>,
}

impl MemoryMeter {
    pub fn new(n: usize, limit: u64, reserve: u64) -> Self {
        Self {
            accounts: vec![MemoryAccount::new(limit, reserve); n],
        }
    }

    pub fn account(&self, node: NodeId) -> &MemoryAccount {
        &self.accounts[node.index()]
    }

    pub fn account_mut(&mut self, node: NodeId) -> &mut MemoryAccount {
        &mut self.accounts[node.index()]
    }

    pub fn charge(&mut self, node: NodeId, bytes: u64, class: MsgClass) -> Result<(), Exhausted> {
        self.account_mut(node).charge(bytes, class)
    }

    pub fn accounts(&self) -> &[MemoryAccount] {
        &self.accounts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1 << 20;

    #[test]
    fn fits_never_exhausts() {
        let mut a = MemoryAccount::new(10 * MB, MB);
        a.charge(9 * MB, MsgClass::Dag).unwrap();
        assert!(a.fits(MB - 1, MsgClass::Dag));
        assert!(!a.fits(MB, MsgClass::Dag));
        assert!(a.fits(MB, MsgClass::Fallback));
        assert!(!a.fits(MB + 1, MsgClass::Fallback));
    }

    #[test]
    fn dag_charge_at_limit_fails() {
        let mut a = MemoryAccount::new(10 * MB, MB);
        a.charge(10 * MB, MsgClass::Dag).unwrap();
        assert!(a.is_exhausted());
        assert_eq!(a.charge(1, MsgClass::Dag), Err(Exhausted { class: MsgClass::Dag }));
    }

    #[test]
    fn exhausted_node_still_has_reserve() {
        let mut a = MemoryAccount::new(10 * MB, MB);
        a.charge(10 * MB, MsgClass::Dag).unwrap();
        assert!(a.charge(MB / 2, MsgClass::Fallback).is_ok());
        assert!(a.charge(MB, MsgClass::Fallback).is_err());
    }

    #[test]
    fn refund_is_exact() {
        let mut a = MemoryAccount::new(10 * MB, MB);
        a.charge(1234, MsgClass::Dag).unwrap();
        a.charge(99, MsgClass::Dag).unwrap();
        a.refund(99, MsgClass::Dag);
        assert_eq!(a.used, 1234);
    }
}
