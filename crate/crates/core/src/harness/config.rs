//! Scenario description. The TOML form is flat keys grouped in sections:
//!
//! ```toml
//! engine = "certified"
//! n = 4
//! f = 1
//! duration_ms = 60000
//! seed = 7
//!
//! [network]
//! delta_ms = 100
//! gst_ms = 0
//!
//! [workload]
//! tx_rate = 1000
//! tx_size = 512
//!
//! [memory]
//! limit = 16777216
//! fallback_reserve = 4194304
//!
//! [fallback]
//! enabled = true
//! ub_limit = 8388608
//!
//! [adversary]
//! strategy = "inflation-ddos"
//! attack_from_ms = 20000
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{DdosEnd, StrategyKind, StrategyParams};
use crate::dag::NodeId;
use crate::lifefin::FallbackConfig;
use crate::simnet::Millis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    /// Reliable-broadcast DAG with no-vote certificates.
    Certified,
    /// Best-effort DAG decided by patterns.
    Uncertified,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Certified => "certified",
            EngineKind::Uncertified => "uncertified",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "certified" | "sailfish" => Ok(EngineKind::Certified),
            "uncertified" | "mysticeti" => Ok(EngineKind::Uncertified),
            _ => Err(ConfigError::Invalid {
                field: "engine",
                reason: format!("unknown engine {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub delta_ms: Millis,
    pub gst_ms: Millis,
    /// Pre-GST delays are drawn from [0, factor·Δ].
    pub pre_gst_factor: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            delta_ms: 100,
            gst_ms: 0,
            pre_gst_factor: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Transactions per second across all nodes.
    pub tx_rate: u64,
    pub tx_size: usize,
    /// Most transactions one vertex carries.
    pub max_batch: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            tx_rate: 1_000,
            tx_size: 512,
            max_batch: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// DAG budget per node, bytes.
    pub limit: u64,
    /// Separate budget for fallback traffic, bytes.
    pub fallback_reserve: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            limit: 16 << 20,
            fallback_reserve: 4 << 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Leader wait; engine default when absent.
    pub leader_timeout_ms: Option<Millis>,
    /// Wait before fetching missing parents (uncertified engine).
    pub sync_delay_ms: Option<Millis>,
    pub sync_retry_ms: Option<Millis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub strategy: StrategyKind,
    /// Controlled or crashed nodes; defaults to f.
    pub faulty: Option<usize>,
    pub crash_at_ms: Millis,
    pub attack_from_ms: Millis,
    pub ddos_target: Option<u32>,
    /// Fixed end of the DDoS window.
    pub ddos_until_ms: Option<Millis>,
    /// Otherwise: this long after the first correct node triggers the
    /// fallback (or forever when the fallback never triggers).
    pub ddos_after_trigger_ms: Millis,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Honest,
            faulty: None,
            crash_at_ms: 0,
            attack_from_ms: 20_000,
            ddos_target: None,
            ddos_until_ms: None,
            ddos_after_trigger_ms: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub engine: EngineKind,
    pub n: usize,
    pub f: usize,
    pub duration_ms: Millis,
    pub seed: u64,
    pub network: NetworkConfig,
    pub workload: WorkloadConfig,
    pub memory: MemoryConfig,
    pub timing: TimingConfig,
    pub fallback: FallbackConfig,
    pub adversary: AdversaryConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            engine: EngineKind::Certified,
            n: 4,
            f: 1,
            duration_ms: 60_000,
            seed: 1,
            network: NetworkConfig::default(),
            workload: WorkloadConfig::default(),
            memory: MemoryConfig::default(),
            timing: TimingConfig::default(),
            fallback: FallbackConfig::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n != 3 * self.f + 1 {
            return Err(invalid("n", format!("n must equal 3f+1 (n = {}, f = {})", self.n, self.f)));
        }
        if self.duration_ms <= self.network.gst_ms {
            return Err(invalid("duration_ms", "duration must exceed GST"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a TOML integer (at most 2^63 - 1)"));
        }
        if self.workload.tx_size == 0 {
            return Err(invalid("workload.tx_size", "must be positive"));
        }
        if self.network.delta_ms == 0 {
            return Err(invalid("network.delta_ms", "must be positive"));
        }
        if self.workload.max_batch == 0 {
            return Err(invalid("workload.max_batch", "must be positive"));
        }
        if self.fallback.enabled {
            if self.fallback.stuck_timeout == 0 {
                return Err(invalid("fallback.stuck_timeout", "must be positive"));
            }
            if self.fallback.ub_limit >= self.memory.limit.saturating_sub(self.memory.fallback_reserve) {
                return Err(invalid(
                    "fallback.ub_limit",
                    "must stay below memory.limit minus memory.fallback_reserve",
                ));
            }
        }
        if self.adversary.faulty.is_some_and(|k| k > self.f) {
            return Err(invalid("adversary.faulty", "at most f nodes may be faulty"));
        }
        if let Some(t) = self.adversary.ddos_target {
            if t as usize >= self.n {
                return Err(invalid("adversary.ddos_target", "not a committee member"));
            }
        }
        if let Some(u) = self.adversary.ddos_until_ms {
            if u <= self.adversary.attack_from_ms {
                return Err(invalid("adversary.ddos_until_ms", "window must end after it starts"));
            }
        }
        crate::adversary::plan(self.adversary.strategy, self.n, self.strategy_params())
            .map_err(|e| invalid("adversary", e.to_string()))?;
        Ok(())
    }

    pub fn strategy_params(&self) -> StrategyParams {
        let a = &self.adversary;
        StrategyParams {
            faulty: a.faulty.unwrap_or(self.f),
            crash_at: a.crash_at_ms,
            attack_from: a.attack_from_ms,
            ddos_target: a.ddos_target.map(NodeId),
            ddos_until: Some(match a.ddos_until_ms {
                Some(u) => DdosEnd::At(u),
                None => DdosEnd::AfterTrigger(a.ddos_after_trigger_ms),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ScenarioConfig::default();
        c.engine = EngineKind::Uncertified;
        c.adversary.strategy = StrategyKind::InflationDdos;
        let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = ScenarioConfig::from_toml("n = 10\nf = 3\n[adversary]\nstrategy = \"inflation\"\n").unwrap();
        assert_eq!(c.n, 10);
        assert_eq!(c.workload.tx_size, 512);
        assert_eq!(c.adversary.strategy, StrategyKind::Inflation);
    }

    #[test]
    fn field_level_errors() {
        let bad = |c: ScenarioConfig| match c.validate() {
            Err(ConfigError::Invalid { field, .. }) => field,
            other => panic!("expected a field error, got {other:?}"),
        };
        assert_eq!(bad(ScenarioConfig { n: 5, ..Default::default() }), "n");
        let mut c = ScenarioConfig::default();
        c.network.gst_ms = c.duration_ms;
        assert_eq!(bad(c), "duration_ms");
        let mut c = ScenarioConfig::default();
        c.workload.tx_size = 0;
        assert_eq!(bad(c), "workload.tx_size");
        let mut c = ScenarioConfig {
            n: 10,
            f: 3,
            ..Default::default()
        };
        c.adversary.strategy = StrategyKind::InflationDdos;
        c.adversary.ddos_target = Some(9);
        assert_eq!(bad(c), "adversary");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_toml("n = 4\nbogus = 1\n").is_err());
    }
}
