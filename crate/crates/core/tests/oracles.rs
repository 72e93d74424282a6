mod common;

use lifefin::harness::{run_scenario, EngineKind};

#[test]
fn decider_matches_brute_force_on_random_dags() {
    let failures: Vec<String> = (0..1200).filter_map(|s| common::check_decider(s).err()).collect();
    assert!(failures.is_empty(), "{} mismatches, first: {}", failures.len(), failures[0]);
}

#[test]
fn random_dags_exercise_every_outcome() {
    use common::Verdict;
    let (mut commit, mut skip, mut undecided) = (0, 0, 0);
    for s in 0..200 {
        let d = common::random_dag(s, 12);
        for v in common::brute_force_statuses(4, 1, &d.vertices).values() {
            match v {
                Verdict::Commit(_) => commit += 1,
                Verdict::Skip => skip += 1,
                Verdict::Undecided => undecided += 1,
            }
        }
    }
    assert!(commit > 0 && skip > 0 && undecided > 0, "{commit}/{skip}/{undecided}");
}

#[test]
fn certified_commits_replay_from_final_dag() {
    for cfg in common::fallback_traces(EngineKind::Certified, 12) {
        let run = run_scenario(&cfg).unwrap();
        for node in run.correct().map(|t| t.id.index()).collect::<Vec<_>>() {
            if let Err(e) = common::replay_certified(&run, node) {
                panic!("seed {} ({:?}): {e}", cfg.seed, cfg.adversary.strategy);
            }
        }
    }
}

#[test]
fn certified_honest_run_replays() {
    let mut cfg = lifefin::harness::ScenarioConfig::default();
    cfg.duration_ms = 20_000;
    let run = run_scenario(&cfg).unwrap();
    for node in 0..cfg.n {
        common::replay_certified(&run, node).unwrap();
    }
}
