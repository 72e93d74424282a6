//! Post-run verdicts. Everything here is recomputed from the run's logs and
//! final DAGs, never from engine-internal flags.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dag::{Digest, NodeId, Round, VertexRef};
use crate::node::{CommitKind, MetricEvent};
use crate::simnet::Millis;

use super::config::EngineKind;
use super::metrics::MetricsSeries;
use super::runner::Run;

/// Two correct outputs disagree at `index`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub index: usize,
    pub a: (NodeId, VertexRef),
    pub b: (NodeId, VertexRef),
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "outputs diverge at index {}: {} has r{}/{} {}, {} has r{}/{} {}",
            self.index,
            self.a.0,
            self.a.1.round,
            self.a.1.creator,
            self.a.1.digest,
            self.b.0,
            self.b.1.round,
            self.b.1.creator,
            self.b.1.digest
        )
    }
}

/// Pass iff every pair of outputs is prefix-related.
pub fn audit_safety(outputs: &[(NodeId, &[VertexRef])]) -> Result<(), Divergence> {
    for (i, (na, a)) in outputs.iter().enumerate() {
        for (nb, b) in &outputs[i + 1..] {
            if let Some(k) = a.iter().zip(b.iter()).position(|(x, y)| x != y) {
                return Err(Divergence {
                    index: k,
                    a: (*na, a[k]),
                    b: (*nb, b[k]),
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub from_sec: u64,
    pub to_sec: u64,
    /// Every listed node committed something in the window.
    pub live: bool,
}

/// Commit activity per `window`-second window, skipping the first one.
pub fn liveness_windows(m: &MetricsSeries, nodes: &[NodeId], window: u64) -> Vec<WindowVerdict> {
    let secs = m.rows.first().map_or(0, Vec::len) as u64;
    (1..secs / window)
        .map(|w| {
            let (from, to) = (w * window, (w + 1) * window);
            let live = nodes.iter().all(|n| {
                m.node(*n)[from as usize..to as usize]
                    .iter()
                    .any(|r| r.committed_bps > 0)
            });
            WindowVerdict {
                from_sec: from,
                to_sec: to,
                live,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub result: Result<(), String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub safety: Result<(), Divergence>,
    pub liveness: Vec<WindowVerdict>,
    pub invariants: Vec<Check>,
}

impl AuditReport {
    /// Safety and every invariant hold. Liveness is reported, not required:
    /// attack runs without the fallback are expected to stall.
    pub fn passed(&self) -> bool {
        self.safety.is_ok() && self.invariants.iter().all(|c| c.result.is_ok())
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(d) = &self.safety {
            out.push(format!("safety: {d}"));
        }
        for c in &self.invariants {
            if let Err(e) = &c.result {
                out.push(format!("{}: {e}", c.name));
            }
        }
        out
    }
}

type Invariant = fn(&Run) -> Result<(), String>;

pub fn audit_run(run: &Run) -> AuditReport {
    let outputs: Vec<(NodeId, &[VertexRef])> = run.correct().map(|n| (n.id, n.ordered.as_slice())).collect();
    let correct: Vec<NodeId> = run.correct().map(|n| n.id).collect();
    let checks: [(&str, Invariant); 8] = [
        ("metrics conservation", conservation),
        ("certified no-equivocation", no_equivocation),
        ("at most 2f vertices above r*", at_most_2f_above),
        ("r* leader not committed before decision", no_precommit_of_r_star),
        ("no correct vertex at r_fb+1", graceful_transition),
        ("acs validity/agreement/termination", acs_properties),
        ("history complete before ordering", history_complete),
        ("ordered outputs are duplicate-free", duplicate_free),
    ];
    AuditReport {
        safety: audit_safety(&outputs),
        liveness: liveness_windows(&run.metrics, &correct, 5),
        invariants: checks
            .iter()
            .map(|(name, f)| Check {
                name: name.to_string(),
                result: f(run),
            })
            .collect(),
    }
}

/// Per node, the last bucket's backlog equals accepted minus ordered bytes
/// summed straight from the event log.
pub fn conservation(run: &Run) -> Result<(), String> {
    for n in &run.nodes {
        let mut ub = 0i64;
        for (_, e) in &n.events {
            match e {
                MetricEvent::VertexAccepted { bytes, fallback: false, .. } => ub += *bytes as i64,
                MetricEvent::VertexOrdered { bytes, fallback: false, .. } => ub -= *bytes as i64,
                _ => {}
            }
        }
        let rows = run.metrics.node(n.id);
        let last = rows.last().map_or(0, |r| r.cumulative_ub);
        let sum: i64 = rows.iter().map(|r| r.proposed_bps as i64 - r.committed_bps as i64).sum();
        if last != ub || sum != ub {
            return Err(format!("node {}: series UB {last}, summed {sum}, log {ub}", n.id));
        }
    }
    Ok(())
}

/// Certified stores hold one vertex per slot, and correct nodes agree on it.
pub fn no_equivocation(run: &Run) -> Result<(), String> {
    if run.config.engine != EngineKind::Certified {
        return Ok(());
    }
    let mut seen: HashMap<(Round, NodeId), (NodeId, Digest)> = HashMap::new();
    for n in run.correct() {
        let store = &run.engines[n.id.index()].core().store;
        for r in 1..=store.highest_round() {
            for c in run.committee().nodes() {
                let vs = store.slot_versions(r, c);
                if vs.len() > 1 {
                    return Err(format!("node {} stores {} versions of slot r{r}/{c}", n.id, vs.len()));
                }
                if let Some(v) = vs.first() {
                    let (holder, d) = *seen.entry((r, c)).or_insert((n.id, v.digest()));
                    if d != v.digest() {
                        return Err(format!("nodes {holder} and {} hold different r{r}/{c}", n.id));
                    }
                }
            }
        }
    }
    Ok(())
}

/// One decided fallback instance seen across correct nodes.
struct Decision {
    view: u64,
    blocks: Vec<(NodeId, VertexRef)>,
    r_star: Round,
    first: Millis,
    last: Millis,
}

fn decisions(run: &Run) -> Vec<Decision> {
    let mut by_view: BTreeMap<u64, Decision> = BTreeMap::new();
    for n in run.correct() {
        for (t, e) in n.events() {
            if let MetricEvent::AcsDecided { view, blocks, .. } = e {
                let d = by_view.entry(*view).or_insert_with(|| Decision {
                    view: *view,
                    blocks: blocks.clone(),
                    r_star: blocks.iter().map(|(_, r)| r.round).max().unwrap_or(0),
                    first: t,
                    last: t,
                });
                d.first = d.first.min(t);
                d.last = d.last.max(t);
            }
        }
    }
    by_view.into_values().collect()
}

/// When the first correct node decides, at most 2f creators have a vertex at
/// round r*+1.
pub fn at_most_2f_above(run: &Run) -> Result<(), String> {
    let f = run.config.f;
    for d in decisions(run) {
        let creators: BTreeSet<NodeId> = run
            .nodes
            .iter()
            .flat_map(|n| n.events())
            .filter_map(|(t, e)| match e {
                MetricEvent::VertexCreated { vertex, .. } if t <= d.first && vertex.round == d.r_star + 1 => {
                    Some(vertex.creator)
                }
                _ => None,
            })
            .collect();
        if creators.len() > 2 * f {
            return Err(format!(
                "view {}: {} creators at r*+1 = {} (bound {})",
                d.view,
                creators.len(),
                d.r_star + 1,
                2 * f
            ));
        }
    }
    Ok(())
}

/// No correct node commits the predefined r* leader through the DAG rule
/// before the decision has reached every correct node.
pub fn no_precommit_of_r_star(run: &Run) -> Result<(), String> {
    let committee = run.committee();
    for d in decisions(run) {
        let leader = committee.leader(d.r_star);
        for n in run.correct() {
            for (t, e) in n.events() {
                if let MetricEvent::LeaderCommitted { leader: l, kind, .. } = e {
                    if t < d.last && *kind != CommitKind::Fallback && l.round == d.r_star && l.creator == leader {
                        return Err(format!("view {}: node {} committed r*={} leader at {t} ms", d.view, n.id, d.r_star));
                    }
                }
            }
        }
    }
    Ok(())
}

/// After finalizing, no correct node creates a vertex at r_fb+1.
pub fn graceful_transition(run: &Run) -> Result<(), String> {
    for n in run.correct() {
        let mut finalized: Vec<(Millis, Round)> = Vec::new();
        for (t, e) in n.events() {
            match e {
                MetricEvent::FallbackFinalized { r_fb, .. } => finalized.push((t, *r_fb)),
                MetricEvent::VertexCreated { vertex, .. } => {
                    if let Some((tf, r_fb)) = finalized.iter().find(|(_, r)| vertex.round == r + 1) {
                        return Err(format!("node {} created r{} after finalizing r_fb={r_fb} at {tf} ms", n.id, vertex.round));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Slack between the first trigger of an instance and the end of the run
/// after which every triggered correct node must have decided.
pub const TERMINATION_SLACK: Millis = 45_000;

pub fn acs_properties(run: &Run) -> Result<(), String> {
    let n = run.config.n;
    let f = run.config.f;
    let end = run.config.duration_ms;
    let created: HashSet<Digest> = run
        .nodes
        .iter()
        .flat_map(|x| x.events())
        .filter_map(|(_, e)| match e {
            MetricEvent::VertexCreated { vertex, .. } => Some(vertex.digest),
            _ => None,
        })
        .collect();
    for d in decisions(run) {
        // validity
        let creators: BTreeSet<NodeId> = d.blocks.iter().map(|(c, _)| *c).collect();
        if creators.len() != d.blocks.len() || d.blocks.len() < n - f {
            return Err(format!("view {}: {} blocks from {} creators", d.view, d.blocks.len(), creators.len()));
        }
        for (c, v) in &d.blocks {
            if v.creator != *c {
                return Err(format!("view {}: block of {c} wraps a vertex of {}", d.view, v.creator));
            }
            if run.nodes[c.index()].correct && v.round > 1 && !created.contains(&v.digest) {
                return Err(format!("view {}: block of correct {c} wraps a vertex it never created", d.view));
            }
        }
        // agreement
        for x in run.correct() {
            for (_, e) in x.events() {
                if let MetricEvent::AcsDecided { view, blocks, .. } = e {
                    if *view == d.view && *blocks != d.blocks {
                        return Err(format!("view {}: node {} decided a different set", d.view, x.id));
                    }
                }
            }
        }
    }
    // termination
    let mut triggered: BTreeMap<u64, (Millis, Vec<NodeId>)> = BTreeMap::new();
    let mut decided: HashSet<(u64, NodeId)> = HashSet::new();
    for x in run.correct() {
        for (t, e) in x.events() {
            match e {
                MetricEvent::FallbackTriggered { view, .. } => {
                    let entry = triggered.entry(*view).or_insert((t, Vec::new()));
                    entry.0 = entry.0.min(t);
                    entry.1.push(x.id);
                }
                MetricEvent::AcsDecided { view, .. } => {
                    decided.insert((*view, x.id));
                }
                _ => {}
            }
        }
    }
    for (view, (t0, nodes)) in triggered {
        if t0 + TERMINATION_SLACK > end {
            continue;
        }
        if let Some(x) = nodes.iter().find(|x| !decided.contains(&(view, **x))) {
            return Err(format!("view {view}: node {x} triggered but never decided"));
        }
    }
    Ok(())
}

/// Every leader a correct node ordered had its whole history locally.
pub fn history_complete(run: &Run) -> Result<(), String> {
    for x in run.correct() {
        for (t, e) in x.events() {
            if let MetricEvent::LeaderCommitted {
                leader,
                history_complete: false,
                ..
            } = e
            {
                return Err(format!("node {} ordered r{}/{} with missing history at {t} ms", x.id, leader.round, leader.creator));
            }
        }
    }
    Ok(())
}

pub fn duplicate_free(run: &Run) -> Result<(), String> {
    for x in run.correct() {
        let mut seen = HashSet::new();
        if let Some(v) = x.ordered.iter().find(|v| !seen.insert(v.digest)) {
            return Err(format!("node {} ordered r{}/{} twice", x.id, v.round, v.creator));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(round: Round, tag: u8) -> VertexRef {
        VertexRef {
            round,
            creator: NodeId(0),
            digest: Digest([tag; 32]),
        }
    }

    #[test]
    fn identical_and_prefix_pass() {
        let a = vec![r(2, 1), r(3, 2), r(4, 3)];
        let b = a[..2].to_vec();
        assert!(audit_safety(&[(NodeId(0), &a), (NodeId(1), &a), (NodeId(2), &b)]).is_ok());
        assert!(audit_safety(&[(NodeId(0), &[]), (NodeId(1), &a)]).is_ok());
    }

    #[test]
    fn divergence_reports_index_and_both_vertices() {
        let a = vec![r(2, 1), r(3, 2), r(4, 3)];
        let b = vec![r(2, 1), r(3, 9)];
        let d = audit_safety(&[(NodeId(0), &a), (NodeId(3), &b)]).unwrap_err();
        assert_eq!(d.index, 1);
        assert_eq!(d.a, (NodeId(0), r(3, 2)));
        assert_eq!(d.b, (NodeId(3), r(3, 9)));
    }
}
