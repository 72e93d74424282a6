//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lifefin::adversary::StrategyKind;
use lifefin::dag::NodeId;
use lifefin::harness::audit::liveness_windows;
use lifefin::harness::{run_batch, run_scenario, EngineKind, NodeTrace, Run, ScenarioConfig};
use lifefin::node::MetricEvent;
use lifefin::simnet::Millis;

type Outcome = Result<String, String>;

const ENGINES: [EngineKind; 2] = [EngineKind::Certified, EngineKind::Uncertified];

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("safety suite", safety),
        ("liveness under synchrony", liveness),
        ("inflation attack without fallback", explosion),
        ("inflation attack with fallback", recovery),
        ("fallback footprint", footprint),
        ("property suite", properties),
        ("oracle equivalence", oracles),
        ("determinism", determinism),
    ];
    let mut ok = true;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                ok = false;
                println!("FAIL {} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cfg: &ScenarioConfig) -> Result<Run, String> {
    run_scenario(cfg).map_err(|e| format!("config: {e}"))
}

fn label(c: &ScenarioConfig) -> String {
    format!("{}/{}/n={}/seed={}", c.engine.name(), c.adversary.strategy.name(), c.n, c.seed)
}

/// Uncommitted bytes (accepted minus ordered, optimistic path only) after
/// each event.
fn ub_walk(t: &NodeTrace) -> Vec<(Millis, i64)> {
    let mut ub = 0i64;
    let mut out = Vec::new();
    for (at, e) in t.events() {
        match e {
            MetricEvent::VertexAccepted { bytes, fallback: false, .. } => ub += *bytes as i64,
            MetricEvent::VertexOrdered { bytes, fallback: false, .. } => ub -= *bytes as i64,
            _ => continue,
        }
        out.push((at, ub));
    }
    out
}

fn ub_at(t: &NodeTrace, at: Millis) -> i64 {
    ub_walk(t).iter().take_while(|(x, _)| *x <= at).last().map_or(0, |(_, u)| *u)
}

fn first_event(t: &NodeTrace, pick: impl Fn(&MetricEvent) -> bool) -> Option<Millis> {
    t.events().find(|(_, e)| pick(e)).map(|(at, _)| at)
}

fn safety() -> Outcome {
    let cfgs = common::safety_matrix(9, 30_000);
    let t = Instant::now();
    let results = run_batch(&cfgs);
    let elapsed = t.elapsed();
    let mut divergent = Vec::new();
    let mut findings = Vec::new();
    for (c, r) in cfgs.iter().zip(&results) {
        match r {
            Err(e) => divergent.push(format!("{}: {e}", label(c))),
            Ok(s) => {
                if let Err(d) = &s.report.safety {
                    divergent.push(format!("{}: {d}", label(c)));
                }
                if !s.report.passed() {
                    findings.push(label(c));
                }
            }
        }
    }
    let summary = format!(
        "{} runs, {} divergent, {} with invariant findings, {:.0}s",
        cfgs.len(),
        divergent.len(),
        findings.len(),
        elapsed.as_secs_f64()
    );
    if cfgs.len() < 200 || !divergent.is_empty() || elapsed > Duration::from_secs(600) {
        return Err(format!("{summary}; first: {:?}", divergent.first()));
    }
    Ok(summary)
}

fn liveness() -> Outcome {
    let mut parts = Vec::new();
    for engine in ENGINES {
        let mut c = ScenarioConfig::default();
        c.engine = engine;
        c.n = 4;
        c.f = 1;
        c.network.gst_ms = 0;
        c.duration_ms = 60_000;
        let r = run(&c)?;
        let ids: Vec<NodeId> = r.correct().map(|t| t.id).collect();
        let w = liveness_windows(&r.metrics, &ids, 5);
        let live = w.iter().filter(|v| v.live).count();
        if live != w.len() || w.is_empty() {
            let dead: Vec<_> = w.iter().filter(|v| !v.live).map(|v| v.from_sec).collect();
            return Err(format!("{}: dead windows starting at {dead:?}", engine.name()));
        }
        parts.push(format!("{} {live}/{} windows", engine.name(), w.len()));
    }
    Ok(parts.join(", "))
}

fn attack(engine: EngineKind, fallback: bool) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.engine = engine;
    c.n = 10;
    c.f = 3;
    c.adversary.strategy = StrategyKind::InflationDdos;
    c.adversary.attack_from_ms = 20_000;
    c.fallback.enabled = fallback;
    if fallback {
        // whichever comes first: round 80 or the byte limit
        c.fallback.trigger_round = Some(80);
        c.duration_ms = 90_000;
    } else {
        c.duration_ms = 60_000;
        c.memory.limit = 8 << 20;
    }
    c
}

fn explosion() -> Outcome {
    let mut parts = Vec::new();
    for engine in ENGINES {
        let c = attack(engine, false);
        let r = run(&c)?;
        let target = r.plan.ddos.map(|d| d.target);
        let from = (c.adversary.attack_from_ms / 1000) as usize;
        let mut exhausted = 0;
        for t in r.correct() {
            let rows = r.metrics.node(t.id);
            let end = first_event(t, |e| matches!(e, MetricEvent::Exhausted)).map(|x| (x / 1000) as usize);
            if end.is_some() {
                exhausted += 1;
            }
            let who = format!("{} {}", engine.name(), t.id);
            if let Some(row) = rows.iter().find(|row| row.t_sec > 22 && row.committed_bps > 0) {
                return Err(format!("{who} committed at {}s", row.t_sec));
            }
            if Some(t.id) == target {
                continue;
            }
            let end = end.unwrap_or(rows.len() - 1);
            if let Some(row) = rows[from..end].iter().find(|row| row.proposed_bps == 0) {
                return Err(format!("{who} proposed nothing at {}s", row.t_sec));
            }
            if let Some(w) = rows[from..=end].windows(2).find(|w| w[1].cumulative_ub <= w[0].cumulative_ub) {
                return Err(format!("{who} backlog stopped growing at {}s before exhaustion", w[1].t_sec));
            }
        }
        if exhausted == 0 {
            return Err(format!("{}: no correct node exhausted", engine.name()));
        }
        parts.push(format!("{} {exhausted} correct nodes exhausted", engine.name()));
    }
    Ok(parts.join(", "))
}

fn recovery() -> Outcome {
    let mut parts = Vec::new();
    for engine in ENGINES {
        let c = attack(engine, true);
        let r = run(&c)?;
        if let Some(t) = r.nodes.iter().find(|t| t.ever_exhausted) {
            return Err(format!("{} {} exhausted", engine.name(), t.id));
        }
        let mut worst_drift = 0i64;
        for t in r.correct() {
            let who = format!("{} {}", engine.name(), t.id);
            let one_vertex = t
                .events()
                .filter_map(|(_, e)| match e {
                    MetricEvent::VertexAccepted { bytes, fallback: false, .. } => Some(*bytes as i64),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            // walk events in order; the drift window closes at the decision
            // event itself, since the backlog is ordered in the same instant
            let (mut ub, mut start, mut drift, mut decided) = (0i64, None, 0i64, None);
            for (at, e) in t.events() {
                match e {
                    MetricEvent::VertexAccepted { bytes, fallback: false, .. } => ub += *bytes as i64,
                    MetricEvent::VertexOrdered { bytes, fallback: false, .. } => ub -= *bytes as i64,
                    MetricEvent::FallbackTriggered { .. } if start.is_none() => start = Some(ub),
                    MetricEvent::AcsDecided { .. } if start.is_some() => {
                        decided = Some(at);
                        break;
                    }
                    _ => {}
                }
                if let Some(s) = start {
                    drift = drift.max((ub - s).abs());
                }
            }
            if start.is_none() {
                return Err(format!("{who} never switched to the fallback"));
            }
            let decided = decided.ok_or_else(|| format!("{who} never decided"))?;
            if drift > one_vertex {
                return Err(format!("{who} backlog moved {drift} B during the fallback (one vertex = {one_vertex} B)"));
            }
            worst_drift = worst_drift.max(drift);
            let after = decided / 1000;
            if !r.metrics.node(t.id).iter().any(|row| row.t_sec > after && row.committed_bps > 0) {
                return Err(format!("{who} did not commit after the decision at {decided} ms"));
            }
        }
        parts.push(format!(
            "{} recovered (DDoS over at {:?} ms, max drift {worst_drift} B)",
            engine.name(),
            r.ddos_end
        ));
    }
    Ok(parts.join(", "))
}

fn footprint() -> Outcome {
    let mut parts = Vec::new();
    for engine in ENGINES {
        let mut per_backlog = Vec::new();
        for mib in [2u64, 20] {
            let mut c = ScenarioConfig::default();
            c.engine = engine;
            // n = 20 is not of the form 3f+1; the next valid committee up
            c.n = 22;
            c.f = 7;
            c.duration_ms = 100_000;
            c.memory.limit = 256 << 20;
            c.memory.fallback_reserve = 16 << 20;
            c.fallback.ub_limit = mib << 20;
            c.adversary.strategy = StrategyKind::InflationDdos;
            c.adversary.attack_from_ms = 0;
            let r = run(&c)?;
            let mut bytes = 0u64;
            let mut backlog = 0i64;
            for t in r.correct() {
                let first = t.fallbacks.first().ok_or_else(|| format!("{} {} never decided", label(&c), t.id))?;
                bytes = bytes.max(first.bytes_used);
                if let Some(trig) = first_event(t, |e| matches!(e, MetricEvent::FallbackTriggered { .. })) {
                    backlog = backlog.max(ub_at(t, trig));
                }
            }
            per_backlog.push((backlog, bytes));
        }
        let (b0, f0) = per_backlog[0];
        let (b1, f1) = per_backlog[1];
        let ratio = f0.max(f1) as f64 / f0.min(f1) as f64;
        let detail = format!(
            "{}: backlog {:.1}/{:.1} MB -> fallback {:.2}/{:.2} MB per node, ratio {ratio:.3}",
            engine.name(),
            b0 as f64 / 1e6,
            b1 as f64 / 1e6,
            f0 as f64 / 1e6,
            f1 as f64 / 1e6
        );
        if f0.max(f1) >= 10_000_000 || ratio >= 1.2 || b1 < 9 * b0 {
            return Err(detail);
        }
        parts.push(detail);
    }
    Ok(parts.join("; "))
}

fn properties() -> Outcome {
    // property -> (audit check, applies to certified, applies to uncertified,
    // needs a decided fallback)
    let props: [(&str, &str, bool, bool, bool); 6] = [
        ("a", "certified no-equivocation", true, false, false),
        ("b", "at most 2f vertices above r*", true, true, true),
        ("c", "r* leader not committed before decision", true, true, true),
        ("d", "no correct vertex at r_fb+1", true, true, true),
        ("e", "acs validity/agreement/termination", true, true, true),
        ("f", "history complete before ordering", false, true, false),
    ];
    let mut traces: BTreeMap<&str, usize> = BTreeMap::new();
    let mut failures: Vec<String> = Vec::new();
    for engine in ENGINES {
        for c in common::fallback_traces(engine, 120) {
            let r = run(&c)?;
            let decided = r.correct().any(|t| !t.fallbacks.is_empty());
            let report = r.audit();
            for (p, check, cert, unc, needs) in props {
                let applies = if engine == EngineKind::Certified { cert } else { unc };
                if !applies || (needs && !decided) {
                    continue;
                }
                *traces.entry(p).or_default() += 1;
                let res = report.invariants.iter().find(|k| k.name == check).map(|k| &k.result);
                match res {
                    Some(Ok(())) => {}
                    Some(Err(e)) => failures.push(format!("({p}) {}: {e}", label(&c))),
                    None => failures.push(format!("({p}) no audit check named {check:?}")),
                }
            }
        }
    }
    let counts = props
        .iter()
        .map(|(p, ..)| format!("({p}) {}", traces.get(p).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(" ");
    let thin = props.iter().any(|(p, ..)| traces.get(p).copied().unwrap_or(0) < 100);
    if thin || !failures.is_empty() {
        return Err(format!("traces {counts}; {} failures, first: {:?}", failures.len(), failures.first()));
    }
    Ok(format!("traces per property {counts}, 0 failures"))
}

fn oracles() -> Outcome {
    let dags = 1500;
    let mismatches: Vec<String> = (0..dags).filter_map(|s| common::check_decider(s).err()).collect();
    if !mismatches.is_empty() {
        return Err(format!("{} decider mismatches, first: {}", mismatches.len(), mismatches[0]));
    }
    let mut cfgs = common::fallback_traces(EngineKind::Certified, 40);
    for (k, s) in common::STRATEGIES.into_iter().enumerate() {
        let mut c = ScenarioConfig::default();
        c.n = 7;
        c.f = 2;
        c.seed = 900 + k as u64;
        c.duration_ms = 20_000;
        c.adversary.strategy = s;
        c.adversary.attack_from_ms = 3_000;
        c.adversary.crash_at_ms = 3_000;
        cfgs.push(c);
    }
    let mut replays = 0;
    for c in &cfgs {
        let r = run(c)?;
        for id in r.correct().map(|t| t.id.index()).collect::<Vec<_>>() {
            common::replay_certified(&r, id).map_err(|e| format!("{}: {e}", label(c)))?;
            replays += 1;
        }
    }
    Ok(format!("{dags} random DAGs, {replays} node replays over {} runs, 0 mismatches", cfgs.len()))
}

fn determinism() -> Outcome {
    let mut cfgs = common::safety_matrix(1, 20_000);
    cfgs.push(attack(EngineKind::Certified, false));
    cfgs.push(attack(EngineKind::Uncertified, true));
    let batch = run_batch(&cfgs);
    for (c, b) in cfgs.iter().zip(&batch) {
        let a1 = run(c)?;
        let a2 = run(c)?;
        if a1.trace_hash != a2.trace_hash {
            return Err(format!("{}: trace hash differs between runs", label(c)));
        }
        if a1.metrics.to_csv_string() != a2.metrics.to_csv_string() {
            return Err(format!("{}: CSV differs between runs", label(c)));
        }
        match b {
            Ok(s) if s.trace_hash == a1.trace_hash => {}
            _ => return Err(format!("{}: batch run disagrees with the sequential one", label(c))),
        }
    }
    Ok(format!("{} scenarios re-run: identical trace hashes and CSV", cfgs.len()))
}
