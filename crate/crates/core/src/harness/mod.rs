//! Scenario runner, metrics and audits.

pub mod audit;
pub mod config;
pub mod metrics;
pub mod runner;

pub use audit::{audit_safety, AuditReport, Divergence};
pub use config::{ConfigError, EngineKind, ScenarioConfig};
pub use metrics::{Format, MetricsSeries, Row};
pub use runner::{run_batch, run_scenario, NodeTrace, Run, RunSummary};
