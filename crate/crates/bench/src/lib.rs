//! Scenario presets shared by the benchmarks.

use lifefin::adversary::StrategyKind;
use lifefin::harness::{EngineKind, ScenarioConfig};

/// All-honest committee of `n`, synchronous from the start.
pub fn honest(engine: EngineKind, n: usize, secs: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.engine = engine;
    c.n = n;
    c.f = (n - 1) / 3;
    c.network.gst_ms = 0;
    c.duration_ms = secs * 1000;
    c
}

/// Inflation with a DDoS on the next leader, switching to the fallback at
/// `trigger_round`.
pub fn attacked(engine: EngineKind, n: usize, secs: u64, trigger_round: u64) -> ScenarioConfig {
    let mut c = honest(engine, n, secs);
    c.adversary.strategy = StrategyKind::InflationDdos;
    c.adversary.attack_from_ms = 1_000;
    c.adversary.ddos_after_trigger_ms = 3_000;
    c.fallback.trigger_round = Some(trigger_round);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for e in [EngineKind::Certified, EngineKind::Uncertified] {
            honest(e, 4, 5).validate().unwrap();
            attacked(e, 10, 5, 8).validate().unwrap();
        }
    }
}
