mod common;

use lifefin::adversary::StrategyKind;
use lifefin::harness::{run_scenario, EngineKind, ScenarioConfig};
use proptest::prelude::*;

fn engine() -> impl Strategy<Value = EngineKind> {
    prop_oneof![Just(EngineKind::Certified), Just(EngineKind::Uncertified)]
}

fn strategy() -> impl Strategy<Value = StrategyKind> {
    proptest::sample::select(common::STRATEGIES.to_vec())
}

fn small(engine: EngineKind, n: usize, seed: u64, secs: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.engine = engine;
    c.n = n;
    c.f = (n - 1) / 3;
    c.seed = seed;
    c.duration_ms = secs * 1000;
    c
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn every_adversary_leaves_correct_nodes_consistent(
        e in engine(),
        s in strategy(),
        n in prop_oneof![Just(4usize), Just(7)],
        seed in 0..=i64::MAX as u64,
        trigger in proptest::option::of(4u64..20),
    ) {
        let mut c = small(e, n, seed, 10);
        c.adversary.strategy = s;
        c.adversary.attack_from_ms = 1_000;
        c.adversary.crash_at_ms = 1_000;
        c.fallback.trigger_round = trigger;
        let report = run_scenario(&c).unwrap().audit();
        prop_assert!(report.safety.is_ok(), "{:?}", report.safety);
        prop_assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn config_survives_toml(e in engine(), s in strategy(), seed in 0..=i64::MAX as u64, limit in 1u64..12) {
        let mut c = small(e, 7, seed, 5);
        c.adversary.strategy = s;
        c.fallback.ub_limit = limit << 20;
        let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn decider_agrees_with_brute_force(seed in any::<u64>()) {
        prop_assert_eq!(common::check_decider(seed), Ok(()));
    }
}

#[test]
fn honest_committee_orders_identically() {
    for e in [EngineKind::Certified, EngineKind::Uncertified] {
        let r = run_scenario(&small(e, 7, 5, 10)).unwrap();
        let first = &r.nodes[0].ordered;
        assert!(first.len() > 100, "{}: ordered only {}", e.name(), first.len());
        for t in &r.nodes {
            let k = t.ordered.len().min(first.len());
            assert_eq!(&t.ordered[..k], &first[..k], "{}: {} diverges", e.name(), t.id);
            assert!(t.fallbacks.is_empty());
        }
    }
}

#[test]
fn fallback_decides_and_commits_resume() {
    for e in [EngineKind::Certified, EngineKind::Uncertified] {
        let mut c = small(e, 4, 11, 20);
        c.adversary.strategy = StrategyKind::Inflation;
        c.adversary.attack_from_ms = 1_000;
        c.fallback.trigger_round = Some(10);
        let r = run_scenario(&c).unwrap();
        assert!(r.audit().passed(), "{:?}", r.audit().failures());
        for t in r.correct() {
            let fb = t.fallbacks.first().unwrap_or_else(|| panic!("{} {} never decided", e.name(), t.id));
            let after = fb.decided_at / 1000 + 1;
            let resumed = r.metrics.node(t.id).iter().any(|row| row.t_sec > after && row.committed_bps > 0);
            assert!(resumed, "{} {} stalled after the fallback", e.name(), t.id);
        }
    }
}

fn flood(fallback: bool) -> ScenarioConfig {
    let mut c = small(EngineKind::Certified, 10, 2, 40);
    c.adversary.strategy = StrategyKind::InflationDdos;
    c.adversary.attack_from_ms = 2_000;
    c.fallback.enabled = fallback;
    c.memory.limit = 8 << 20;
    c.fallback.ub_limit = 2 << 20;
    c
}

#[test]
fn tight_memory_without_fallback_exhausts() {
    let r = run_scenario(&flood(false)).unwrap();
    assert!(r.correct().any(|t| t.ever_exhausted));
    // exhaustion costs liveness, never safety
    assert!(r.audit().safety.is_ok());
}

#[test]
fn same_memory_with_fallback_survives() {
    let r = run_scenario(&flood(true)).unwrap();
    assert!(r.nodes.iter().all(|t| !t.ever_exhausted));
    assert!(r.correct().all(|t| !t.fallbacks.is_empty()));
    assert!(r.audit().passed(), "{:?}", r.audit().failures());
}

#[test]
fn oversized_seed_is_rejected() {
    let mut c = small(EngineKind::Certified, 4, u64::MAX, 5);
    assert!(c.validate().is_err());
    c.seed = i64::MAX as u64;
    c.validate().unwrap();
}

#[test]
fn back_to_back_instances_all_decide() {
    // the release burst after the first decision pushes the backlog straight
    // back over the limit while vertices are at full size
    for e in [EngineKind::Certified, EngineKind::Uncertified] {
        let mut c = small(e, 10, 1, 90);
        c.adversary.strategy = StrategyKind::InflationDdos;
        c.adversary.attack_from_ms = 20_000;
        let r = run_scenario(&c).unwrap();
        let report = r.audit();
        assert!(report.passed(), "{}: {:?}", e.name(), report.failures());
        assert!(r.nodes.iter().all(|t| !t.ever_exhausted));
        assert!(r.correct().all(|t| !t.fallbacks.is_empty()));
    }
}

#[test]
fn exported_csv_matches_in_memory_rendering() {
    let r = run_scenario(&small(EngineKind::Certified, 4, 8, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    r.metrics.export(lifefin::harness::Format::Csv, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), r.metrics.to_csv_string());
}
