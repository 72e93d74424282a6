//! Shared by the integration suites and the acceptance binary: random DAGs,
//! a brute-force leader-status oracle, a commit-replay oracle, and the
//! scenario sets the suites run.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use lifefin::adversary::StrategyKind;
use lifefin::dag::{Committee, DagStore, Digest, NodeId, Round, Vertex, VertexPtr, VertexRef};
use lifefin::harness::{EngineKind, Run, ScenarioConfig};
use lifefin::mysticeti::{Decider, Status};
use lifefin::node::{CommitKind, Leaders, MetricEvent};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomDag {
    pub committee: Committee,
    /// Insertion order; parents always precede children.
    pub vertices: Vec<VertexPtr>,
    pub store: DagStore,
}

/// A DAG over n = 4 with up to `max_rounds` rounds: random absences, random
/// parent subsets (biased for or against the previous leader), occasional
/// weak links two rounds back and occasional equivocations.
pub fn random_dag(seed: u64, max_rounds: Round) -> RandomDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let committee = Committee::new(4, 1).unwrap();
    let n = committee.n();
    let q = committee.quorum();
    let rounds = rng.gen_range(3..=max_rounds);
    let presence = rng.gen_range(0.55..1.0);
    let lead_bias = rng.gen_range(0.0..1.0);
    let equivocation = if rng.gen_bool(0.3) { 0.15 } else { 0.0 };
    let weak = rng.gen_range(0.0..0.3);

    let mut store = DagStore::new(committee);
    let mut vertices: Vec<VertexPtr> = Vec::new();
    let mut by_round: BTreeMap<Round, Vec<VertexPtr>> = BTreeMap::new();
    let mut tag = 0u64;
    let mut payload = |rng: &mut ChaCha8Rng| {
        tag += 1;
        let mut p = tag.to_le_bytes().to_vec();
        p.push(rng.gen());
        p
    };

    for c in 0..n {
        let v = Arc::new(Vertex::new(1, NodeId(c as u32), Vec::new(), Vec::new(), None));
        store.insert_vertex(v.clone()).unwrap();
        vertices.push(v.clone());
        by_round.entry(1).or_default().push(v);
    }

    for r in 2..=rounds {
        let prev = by_round.get(&(r - 1)).cloned().unwrap_or_default();
        let mut prev_by: BTreeMap<NodeId, Vec<VertexPtr>> = BTreeMap::new();
        for v in &prev {
            prev_by.entry(v.creator()).or_default().push(v.clone());
        }
        if prev_by.len() < q {
            break;
        }
        let prev_leader = NodeId(((r - 1) % n as u64) as u32);
        let mut made = Vec::new();
        for c in 0..n {
            if !rng.gen_bool(presence) {
                continue;
            }
            let copies = if rng.gen_bool(equivocation) { 2 } else { 1 };
            for copy in 0..copies {
                let mut creators: Vec<NodeId> = prev_by.keys().copied().collect();
                creators.shuffle(&mut rng);
                let want_leader = rng.gen_bool(lead_bias);
                let has_leader = creators.contains(&prev_leader);
                if has_leader && !want_leader && creators.len() > q {
                    creators.retain(|x| *x != prev_leader);
                }
                let k = rng.gen_range(q..=creators.len());
                let mut chosen: Vec<NodeId> = creators[..k].to_vec();
                if has_leader && want_leader && !chosen.contains(&prev_leader) {
                    chosen[0] = prev_leader;
                }
                let mut refs: Vec<VertexRef> = chosen
                    .iter()
                    .map(|x| prev_by[x].choose(&mut rng).unwrap().reference())
                    .collect();
                if r > 2 && rng.gen_bool(weak) {
                    if let Some(old) = by_round.get(&(r - 2)).and_then(|vs| vs.choose(&mut rng)) {
                        refs.push(old.reference());
                    }
                }
                let v = Arc::new(Vertex::new(r, NodeId(c as u32), payload(&mut rng), refs, None));
                if copy == 0 {
                    store.insert_vertex(v.clone()).unwrap();
                } else {
                    store.insert_evidence(v.clone()).unwrap();
                }
                vertices.push(v.clone());
                made.push(v);
            }
        }
        by_round.insert(r, made);
    }
    RandomDag {
        committee,
        vertices,
        store,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Commit(Digest),
    Skip,
    Undecided,
}

impl From<&Status> for Verdict {
    fn from(s: &Status) -> Self {
        match s {
            Status::Commit(v) => Verdict::Commit(v.digest()),
            Status::Skip => Verdict::Skip,
            Status::Undecided => Verdict::Undecided,
        }
    }
}

/// Leader statuses evaluated straight from the pattern definitions, by
/// exhaustive scans over an index-based copy of the DAG. Among several
/// committable versions the lowest digest wins.
pub fn brute_force_statuses(n: usize, f: usize, vs: &[VertexPtr]) -> BTreeMap<Round, Verdict> {
    let q = 2 * f + 1;
    let idx: HashMap<Digest, usize> = vs.iter().enumerate().map(|(i, v)| (v.digest(), i)).collect();
    let parents: Vec<BTreeSet<usize>> = vs
        .iter()
        .map(|v| v.references().iter().filter_map(|r| idx.get(&r.digest).copied()).collect())
        .collect();
    // ancestors, computed in insertion (topological) order
    let mut anc: Vec<BTreeSet<usize>> = Vec::with_capacity(vs.len());
    for i in 0..vs.len() {
        let mut a = BTreeSet::new();
        for &p in &parents[i] {
            a.insert(p);
            a.extend(anc[p].iter().copied());
        }
        anc.push(a);
    }
    let at = |r: Round| -> Vec<usize> { (0..vs.len()).filter(|&i| vs[i].round() == r).collect() };
    let creators = |set: &[usize]| -> usize { set.iter().map(|&i| vs[i].creator()).collect::<BTreeSet<_>>().len() };
    let leader = |r: Round| NodeId((r % n as u64) as u32);
    let versions = |r: Round| -> Vec<usize> {
        let mut v: Vec<usize> = at(r).into_iter().filter(|&i| vs[i].creator() == leader(r)).collect();
        v.sort_by_key(|&i| vs[i].digest());
        v
    };
    let certifies = |w: usize, v: usize| -> bool {
        let supp: Vec<usize> = parents[w]
            .iter()
            .copied()
            .filter(|&u| vs[u].round() == vs[v].round() + 1 && parents[u].contains(&v))
            .collect();
        creators(&supp) >= q
    };

    let top = vs.iter().map(|v| v.round()).max().unwrap_or(0);
    let mut out: BTreeMap<Round, Verdict> = BTreeMap::new();
    for r in (1..=top).rev() {
        let vers = versions(r);
        let mut verdict = None;
        for &v in &vers {
            let certs: Vec<usize> = at(r + 2).into_iter().filter(|&w| certifies(w, v)).collect();
            if creators(&certs) >= q {
                verdict = Some(Verdict::Commit(vs[v].digest()));
                break;
            }
        }
        if verdict.is_none() {
            let next = at(r + 1);
            let blocked = vers.iter().all(|&v| {
                let without: Vec<usize> = next.iter().copied().filter(|&u| !parents[u].contains(&v)).collect();
                creators(&without) >= q
            });
            if creators(&next) >= q && blocked {
                verdict = Some(Verdict::Skip);
            }
        }
        let verdict = verdict.unwrap_or_else(|| {
            let anchor = out.range(r + 3..).find(|(_, s)| **s != Verdict::Skip).map(|(_, s)| s.clone());
            match anchor {
                Some(Verdict::Commit(a)) => {
                    let a = idx[&a];
                    let hist: Vec<usize> = at(r + 2).into_iter().filter(|w| anc[a].contains(w)).collect();
                    vers.iter()
                        .find(|&&v| hist.iter().any(|&w| certifies(w, v)))
                        .map(|&v| Verdict::Commit(vs[v].digest()))
                        .unwrap_or(Verdict::Skip)
                }
                _ => Verdict::Undecided,
            }
        });
        out.insert(r, verdict);
    }
    out
}

/// Compare the engine's decider with the oracle on one random DAG.
pub fn check_decider(seed: u64) -> Result<(), String> {
    let dag = random_dag(seed, 12);
    let c = dag.committee;
    let expected = brute_force_statuses(c.n(), c.f(), &dag.vertices);
    let mut decider = Decider::new(c);
    let got: BTreeMap<Round, Verdict> = decider
        .statuses(&dag.store, &Leaders::new(c))
        .iter()
        .map(|(r, s, _)| (*r, Verdict::from(s)))
        .collect();
    if got == expected {
        return Ok(());
    }
    let first = expected
        .iter()
        .find(|(r, s)| got.get(r) != Some(s))
        .map(|(r, s)| format!("round {r}: oracle {s:?}, decider {:?}", got.get(r)))
        .unwrap_or_else(|| format!("decider has extra rounds {:?}", got.keys().collect::<Vec<_>>()));
    Err(format!("seed {seed}: {first}"))
}

/// Recompute one node's commits from its final DAG: walk back from every
/// anchor (direct or fallback commit) through the round leaders it reaches,
/// order each leader's not-yet-ordered history by (round, creator, digest),
/// and compare with what the node emitted. Direct anchors must also have a
/// quorum of next-round vertices referencing them, unless they sit in the
/// last two rounds of the final DAG (commits follow first messages, so the
/// supporting vertices may still be in flight when the run stops).
pub fn replay_certified(run: &Run, node: usize) -> Result<(), String> {
    let c = run.committee();
    let q = c.quorum();
    let store = &run.engines[node].core().store;
    let all = store.all_vertices();
    let by_digest: HashMap<Digest, VertexPtr> = all.iter().map(|v| (v.digest(), v.clone())).collect();
    let reaches = |from: &VertexPtr, to: &Digest| -> bool {
        let mut stack = vec![from.clone()];
        let mut seen = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if v.digest() == *to {
                return true;
            }
            for r in v.references() {
                if seen.insert(r.digest) {
                    if let Some(p) = by_digest.get(&r.digest) {
                        stack.push(p.clone());
                    }
                }
            }
        }
        false
    };

    let top = all.iter().map(|v| v.round()).max().unwrap_or(0);
    let trace = &run.nodes[node];
    let mut overrides: BTreeMap<Round, NodeId> = BTreeMap::new();
    let mut emitted: Vec<(VertexRef, CommitKind)> = Vec::new();
    for (_, e) in trace.events() {
        match e {
            MetricEvent::FallbackLeader { round, creator, .. } => {
                overrides.insert(*round, *creator);
            }
            MetricEvent::LeaderCommitted { leader, kind, .. } => emitted.push((*leader, *kind)),
            _ => {}
        }
    }

    let mut leaders_out: Vec<VertexRef> = Vec::new();
    let mut order: Vec<VertexRef> = Vec::new();
    let mut ordered: BTreeSet<Digest> = BTreeSet::new();
    let mut last: Round = 0;
    for (anchor, kind) in emitted.iter().filter(|(_, k)| *k != CommitKind::Indirect) {
        let a = by_digest
            .get(&anchor.digest)
            .ok_or_else(|| format!("anchor {anchor:?} missing from the final DAG"))?;
        if *kind == CommitKind::Direct && a.round() + 2 <= top {
            let support: BTreeSet<NodeId> = all
                .iter()
                .filter(|u| u.round() == a.round() + 1 && u.references_digest(&a.digest()))
                .map(|u| u.creator())
                .collect();
            if support.len() < q {
                return Err(format!("direct anchor {anchor:?} has support {} < {q}", support.len()));
            }
        }
        let mut chain = vec![a.clone()];
        let mut cur = a.clone();
        for r in (last + 1..a.round()).rev() {
            let who = overrides.get(&r).copied().unwrap_or(NodeId((r % c.n() as u64) as u32));
            let slot: Vec<&VertexPtr> = all.iter().filter(|v| v.round() == r && v.creator() == who).collect();
            if slot.len() > 1 {
                return Err(format!("two versions of certified slot ({r}, {who})"));
            }
            if let Some(l) = slot.first() {
                if reaches(&cur, &l.digest()) {
                    cur = (*l).clone();
                    chain.push(cur.clone());
                }
            }
        }
        last = a.round();
        while let Some(l) = chain.pop() {
            leaders_out.push(l.reference());
            let mut hist: Vec<VertexPtr> = Vec::new();
            let mut stack = vec![l.clone()];
            let mut seen = BTreeSet::from([l.digest()]);
            while let Some(v) = stack.pop() {
                if ordered.contains(&v.digest()) {
                    continue;
                }
                hist.push(v.clone());
                for r in v.references() {
                    if seen.insert(r.digest) {
                        if let Some(p) = by_digest.get(&r.digest) {
                            stack.push(p.clone());
                        }
                    }
                }
            }
            hist.sort_by_key(|v| (v.round(), v.creator(), v.digest()));
            for v in hist {
                ordered.insert(v.digest());
                order.push(v.reference());
            }
        }
    }

    let got_leaders: Vec<VertexRef> = emitted.iter().map(|(l, _)| *l).collect();
    if got_leaders != leaders_out {
        let i = got_leaders.iter().zip(&leaders_out).position(|(a, b)| a != b);
        return Err(format!(
            "node {node}: leader sequences differ (engine {}, replay {}, first mismatch at {i:?})",
            got_leaders.len(),
            leaders_out.len()
        ));
    }
    if trace.ordered != order {
        let i = trace.ordered.iter().zip(&order).position(|(a, b)| a != b);
        return Err(format!(
            "node {node}: ordered output differs (engine {}, replay {}, first mismatch at {i:?})",
            trace.ordered.len(),
            order.len()
        ));
    }
    Ok(())
}

fn base(engine: EngineKind, n: usize, seed: u64, duration_ms: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.engine = engine;
    c.n = n;
    c.f = (n - 1) / 3;
    c.seed = seed;
    c.duration_ms = duration_ms;
    c
}

pub const STRATEGIES: [StrategyKind; 6] = [
    StrategyKind::Honest,
    StrategyKind::Crash,
    StrategyKind::Inflation,
    StrategyKind::InflationDdos,
    StrategyKind::Equivocator,
    StrategyKind::PhantomPost,
];

/// The safety matrix: both engines, every strategy, n in {4, 10}, `per`
/// seeds each.
pub fn safety_matrix(per: u64, duration_ms: u64) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for engine in [EngineKind::Certified, EngineKind::Uncertified] {
        for s in STRATEGIES {
            for n in [4, 10] {
                for k in 0..per {
                    let mut c = base(engine, n, 1000 + k * 7919 + n as u64, duration_ms);
                    c.adversary.strategy = s;
                    c.adversary.attack_from_ms = 4_000;
                    c.adversary.crash_at_ms = 3_000;
                    if s == StrategyKind::InflationDdos {
                        // make sure the fallback runs inside the window
                        c.fallback.trigger_round = Some(30 + k % 20);
                        c.adversary.ddos_after_trigger_ms = 5_000;
                    }
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Short adversarial traces that each go through at least one fallback
/// instance (an early round trigger) while the adversary is active.
pub fn fallback_traces(engine: EngineKind, count: u64) -> Vec<ScenarioConfig> {
    let adversarial = [
        StrategyKind::InflationDdos,
        StrategyKind::Inflation,
        StrategyKind::Equivocator,
        StrategyKind::PhantomPost,
        StrategyKind::Crash,
    ];
    (0..count)
        .map(|k| {
            let n = if k % 3 == 2 { 7 } else { 4 };
            let mut c = base(engine, n, 50_000 + k, 14_000);
            c.adversary.strategy = adversarial[(k % adversarial.len() as u64) as usize];
            c.adversary.attack_from_ms = 1_000;
            c.adversary.crash_at_ms = 1_000;
            c.fallback.trigger_round = Some(6 + k % 10);
            c
        })
        .collect()
}
