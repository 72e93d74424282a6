//! Byzantine strategies and network attacks.
//!
//! A strategy fixes which nodes misbehave and how; engines consult the
//! per-node [`Behavior`] at the few decision points where an attacker can
//! deviate. Crashes and DDoS windows are applied by the harness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::NodeId;
use crate::simnet::Millis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Honest,
    /// f nodes stop at `crash_at`.
    Crash,
    /// Withhold leader votes and own leader vertices.
    Inflation,
    /// Inflation plus a DDoS window on one correct node.
    InflationDdos,
    /// Send conflicting vertices to the two halves of the committee.
    Equivocator,
    /// Propose PoST blocks wrapping vertices with fabricated history.
    PhantomPost,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Honest,
        StrategyKind::Crash,
        StrategyKind::Inflation,
        StrategyKind::InflationDdos,
        StrategyKind::Equivocator,
        StrategyKind::PhantomPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Honest => "honest",
            StrategyKind::Crash => "crash",
            StrategyKind::Inflation => "inflation",
            StrategyKind::InflationDdos => "inflation-ddos",
            StrategyKind::Equivocator => "equivocator",
            StrategyKind::PhantomPost => "phantom-post",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = AdversaryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AdversaryError::UnknownStrategy(s.to_string()))
    }
}

/// How one node behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Behavior {
    #[default]
    Honest,
    Inflation,
    Equivocator,
    PhantomPost,
}

impl Behavior {
    pub fn is_byzantine(self) -> bool {
        self != Behavior::Honest
    }

    /// Never reference the current leader vertex.
    pub fn withholds_leader_refs(self) -> bool {
        self == Behavior::Inflation
    }

    pub fn skips_own_leader_round(self) -> bool {
        self == Behavior::Inflation
    }

    /// No PoST, no signatures, no ACS participation.
    pub fn silent_in_fallback(self) -> bool {
        self == Behavior::Inflation
    }

    pub fn equivocates(self) -> bool {
        self == Behavior::Equivocator
    }

    pub fn phantom_post(self) -> bool {
        self == Behavior::PhantomPost
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("DDoS target {0} is Byzantine")]
    ByzantineTarget(NodeId),
    #[error("DDoS target {0} is not a committee member")]
    UnknownTarget(NodeId),
    #[error("DDoS window must start before it ends")]
    EmptyWindow,
}

/// When a DDoS window ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdosEnd {
    At(Millis),
    /// Some delay after the first correct node triggers the fallback.
    AfterTrigger(Millis),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdosWindow {
    pub target: NodeId,
    pub from: Millis,
    pub until: DdosEnd,
}

/// The concrete per-node assignment of a strategy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub behaviors: Vec<Behavior>,
    pub crashes: Vec<(NodeId, Millis)>,
    pub ddos: Option<DdosWindow>,
}

impl Plan {
    pub fn byzantine(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.behaviors
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_byzantine())
            .map(|(i, _)| NodeId(i as u32))
    }

    /// Correct = neither Byzantine nor crashed.
    pub fn is_correct(&self, node: NodeId) -> bool {
        !self.behaviors[node.index()].is_byzantine() && !self.crashes.iter().any(|(c, _)| *c == node)
    }
}

/// Parameters a strategy may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// Number of controlled (or crashed) nodes; at most f.
    pub faulty: usize,
    pub crash_at: Millis,
    pub attack_from: Millis,
    pub ddos_target: Option<NodeId>,
    pub ddos_until: Option<DdosEnd>,
}

/// The controlled nodes are the highest ids, so node 0 leads round 0 mod n
/// honestly in every strategy.
pub fn plan(kind: StrategyKind, n: usize, params: StrategyParams) -> Result<Plan, AdversaryError> {
    let k = params.faulty.min(n);
    let bad: Vec<usize> = (n - k..n).collect();
    let mut behaviors = vec![Behavior::Honest; n];
    let mut crashes = Vec::new();
    let mut ddos = None;
    let assign = |b: Behavior, beh: &mut Vec<Behavior>| {
        for &i in &bad {
            beh[i] = b;
        }
    };
    match kind {
        StrategyKind::Honest => {}
        StrategyKind::Crash => crashes = bad.iter().map(|&i| (NodeId(i as u32), params.crash_at)).collect(),
        StrategyKind::Inflation => assign(Behavior::Inflation, &mut behaviors),
        StrategyKind::InflationDdos => {
            assign(Behavior::Inflation, &mut behaviors);
            let target = params.ddos_target.unwrap_or(NodeId(1.min(n as u32 - 1)));
            if target.index() >= n {
                return Err(AdversaryError::UnknownTarget(target));
            }
            if behaviors[target.index()].is_byzantine() {
                return Err(AdversaryError::ByzantineTarget(target));
            }
            let until = params.ddos_until.unwrap_or(DdosEnd::AfterTrigger(20_000));
            if let DdosEnd::At(u) = until {
                if u <= params.attack_from {
                    return Err(AdversaryError::EmptyWindow);
                }
            }
            ddos = Some(DdosWindow {
                target,
                from: params.attack_from,
                until,
            });
        }
        StrategyKind::Equivocator => assign(Behavior::Equivocator, &mut behaviors),
        StrategyKind::PhantomPost => assign(Behavior::PhantomPost, &mut behaviors),
    }
    Ok(Plan {
        behaviors,
        crashes,
        ddos,
    })
}
