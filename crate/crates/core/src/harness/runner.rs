//! Drives one scenario: builds the committee, runs every node's engine over
//! the simulated network, applies crashes and DDoS windows, and collects the
//! per-node logs the metrics and audits are computed from.

use std::sync::Arc;

use rayon::prelude::*;

use crate::adversary::{self, DdosEnd, Plan};
use crate::dag::{Committee, Digest, KeyRegistry, NodeId, VertexRef};
use crate::lifefin::{Fallback, FallbackRecord};
use crate::mysticeti::{Mysticeti, MysticetiConfig};
use crate::node::{Core, Ctx, Dest, Engine, MetricEvent, Outbox, Timer, TxSource};
use crate::sailfish::{Sailfish, SailfishConfig};
use crate::simnet::{Event, Millis, NetConfig, NetStats, SimNet};
use crate::wire::Message;

use super::audit::{self, AuditReport};
use super::config::{ConfigError, EngineKind, ScenarioConfig};
use super::metrics::MetricsSeries;

/// What one node did during a run.
#[derive(Clone, Debug)]
pub struct NodeTrace {
    pub id: NodeId,
    /// Neither Byzantine nor crashed.
    pub correct: bool,
    pub crashed_at: Option<Millis>,
    pub events: Vec<(Millis, MetricEvent)>,
    pub ordered: Vec<VertexRef>,
    pub ever_exhausted: bool,
    pub fallback_peak: u64,
    pub fallbacks: Vec<FallbackRecord>,
}

impl NodeTrace {
    pub fn events(&self) -> impl Iterator<Item = (Millis, &MetricEvent)> + '_ {
        self.events.iter().map(|(t, e)| (*t, e))
    }
}

pub struct Run {
    pub config: ScenarioConfig,
    pub plan: Plan,
    pub nodes: Vec<NodeTrace>,
    /// Final engine state, for audits that look at the DAG itself.
    pub engines: Vec<Box<dyn Engine>>,
    pub metrics: MetricsSeries,
    pub trace_hash: Digest,
    pub stats: NetStats,
    /// When the DDoS window actually closed, if it did.
    pub ddos_end: Option<Millis>,
}

impl Run {
    pub fn committee(&self) -> Committee {
        Committee::new(self.config.n, self.config.f).expect("validated")
    }

    pub fn correct(&self) -> impl Iterator<Item = &NodeTrace> + '_ {
        self.nodes.iter().filter(|n| n.correct)
    }

    pub fn audit(&self) -> AuditReport {
        audit::audit_run(self)
    }
}

/// Small summary kept by batch runs instead of the full state.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub engine: EngineKind,
    pub strategy: adversary::StrategyKind,
    pub n: usize,
    pub seed: u64,
    pub trace_hash: Digest,
    pub report: AuditReport,
    pub committed_leaders: usize,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_engines(cfg: &ScenarioConfig, plan: &Plan, registry: &Arc<KeyRegistry>) -> Vec<Box<dyn Engine>> {
    let delta = cfg.network.delta_ms;
    let coin_seed = mix(cfg.seed, 0xc017);
    let sync_delay = cfg.timing.sync_delay_ms.unwrap_or(3 * delta);
    let sync_retry = cfg.timing.sync_retry_ms.unwrap_or(5 * delta);
    let confirmations = match cfg.engine {
        EngineKind::Certified => cfg.f + 1,
        EngineKind::Uncertified => 1,
    };
    (0..cfg.n)
        .map(|i| {
            let me = NodeId(i as u32);
            let behavior = plan.behaviors[i];
            let fb = Fallback::new(cfg.fallback, me, registry.clone(), coin_seed, behavior.silent_in_fallback());
            let w = &cfg.workload;
            let tx = TxSource::new(w.tx_rate, cfg.n, w.tx_size, w.max_batch, mix(cfg.seed, 0x7800 + i as u64), me);
            let core = Core::new(me, registry.clone(), confirmations, fb, tx, behavior, sync_delay, sync_retry);
            let e: Box<dyn Engine> = match cfg.engine {
                EngineKind::Certified => {
                    let mut sc = SailfishConfig::default();
                    if let Some(t) = cfg.timing.leader_timeout_ms {
                        sc.leader_timeout = t;
                    }
                    Box::new(Sailfish::new(core, sc))
                }
                EngineKind::Uncertified => {
                    let mut mc = MysticetiConfig::default();
                    if let Some(t) = cfg.timing.leader_timeout_ms {
                        mc.leader_timeout = t;
                    }
                    Box::new(Mysticeti::new(core, mc))
                }
            };
            e
        })
        .collect()
}

struct Driver {
    net: SimNet<Message, Timer>,
    engines: Vec<Box<dyn Engine>>,
    logs: Vec<Vec<(Millis, MetricEvent)>>,
    crash_at: Vec<Option<Millis>>,
    correct: Vec<bool>,
    /// Open DDoS window waiting for the first trigger, with its extension.
    pending_ddos: Option<(usize, Millis)>,
    ddos_end: Option<Millis>,
}

impl Driver {
    fn alive(&self, node: NodeId, t: Millis) -> bool {
        self.crash_at[node.index()].map_or(true, |c| t < c)
    }

    fn handle(&mut self, node: NodeId, f: impl FnOnce(&mut dyn Engine, &mut Ctx<'_>)) {
        let now = self.net.now();
        let mut out = Outbox::default();
        {
            let mut ctx = Ctx {
                now,
                mem: self.net.meter_mut().account_mut(node),
                out: &mut out,
            };
            f(self.engines[node.index()].as_mut(), &mut ctx);
        }
        self.flush(node, now, out);
    }

    fn flush(&mut self, from: NodeId, now: Millis, out: Outbox) {
        let n = self.engines.len();
        for (dest, msg) in out.sends {
            let (class, bytes) = (msg.class(), msg.wire_size());
            match dest {
                Dest::To(to) => {
                    let _ = self.net.send(from, to, msg, class, bytes);
                }
                Dest::All => {
                    for j in 0..n {
                        let _ = self.net.send(from, NodeId(j as u32), msg.clone(), class, bytes);
                    }
                }
            }
        }
        for (at, t) in out.timers {
            self.net.set_timer(from, at, t);
        }
        for e in out.events {
            match &e {
                MetricEvent::LeaderCommitted { leader, .. } => {
                    let mut b = Vec::with_capacity(36);
                    b.extend_from_slice(&from.0.to_le_bytes());
                    b.extend_from_slice(leader.digest.as_bytes());
                    self.net.trace_note(&b);
                }
                MetricEvent::FallbackTriggered { .. } if self.correct[from.index()] => {
                    if let Some((id, extra)) = self.pending_ddos.take() {
                        let until = now + extra;
                        self.net.resolve_window(id, until).expect("window is open");
                        self.ddos_end = Some(until);
                    }
                }
                _ => {}
            }
            self.logs[from.index()].push((now, e));
        }
    }
}

/// Run one scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Run, ConfigError> {
    cfg.validate()?;
    let plan = adversary::plan(cfg.adversary.strategy, cfg.n, cfg.strategy_params()).map_err(|e| ConfigError::Invalid {
        field: "adversary",
        reason: e.to_string(),
    })?;
    let committee = Committee::new(cfg.n, cfg.f).map_err(|e| ConfigError::Invalid {
        field: "n",
        reason: e.to_string(),
    })?;
    let registry = Arc::new(KeyRegistry::new(mix(cfg.seed, 0x6b65), committee));
    let net = SimNet::new(NetConfig {
        n: cfg.n,
        delta: cfg.network.delta_ms,
        gst: cfg.network.gst_ms,
        pre_gst_factor: cfg.network.pre_gst_factor,
        seed: cfg.seed,
        memory_limit: cfg.memory.limit,
        fallback_reserve: cfg.memory.fallback_reserve,
    });
    let mut crash_at = vec![None; cfg.n];
    for (node, t) in &plan.crashes {
        crash_at[node.index()] = Some(*t);
    }
    let mut d = Driver {
        net,
        engines: build_engines(cfg, &plan, &registry),
        logs: vec![Vec::new(); cfg.n],
        crash_at,
        correct: (0..cfg.n).map(|i| plan.is_correct(NodeId(i as u32))).collect(),
        pending_ddos: None,
        ddos_end: None,
    };
    if let Some(w) = plan.ddos {
        match w.until {
            DdosEnd::At(u) => {
                d.net.add_window(w.target, w.from, Some(u)).expect("validated window");
                d.ddos_end = Some(u);
            }
            DdosEnd::AfterTrigger(extra) => {
                let id = d.net.add_window(w.target, w.from, None).expect("validated window");
                d.pending_ddos = Some((id, extra));
            }
        }
    }

    for i in 0..cfg.n {
        let node = NodeId(i as u32);
        if d.alive(node, 0) {
            d.handle(node, |e, ctx| e.start(ctx));
        }
    }
    while let Some((t, events)) = d.net.step() {
        if t > cfg.duration_ms {
            break;
        }
        for ev in events {
            match ev {
                Event::Deliver(env) => {
                    if d.alive(env.to, t) {
                        d.handle(env.to, |e, ctx| e.on_message(ctx, env.from, env.message));
                    }
                }
                Event::Timer { node, token } => {
                    if d.alive(node, t) {
                        d.handle(node, |e, ctx| e.on_timer(ctx, token));
                    }
                }
            }
        }
    }

    let meter = d.net.meter();
    let nodes: Vec<NodeTrace> = (0..cfg.n)
        .map(|i| {
            let id = NodeId(i as u32);
            let acct = meter.account(id);
            let core = d.engines[i].core();
            NodeTrace {
                id,
                correct: d.correct[i],
                crashed_at: d.crash_at[i],
                events: std::mem::take(&mut d.logs[i]),
                ordered: core.ordered.clone(),
                ever_exhausted: acct.ever_exhausted,
                fallback_peak: acct.fallback_peak,
                fallbacks: core.fb.history.clone(),
            }
        })
        .collect();
    let logs: Vec<Vec<(Millis, MetricEvent)>> = nodes.iter().map(|n| n.events.clone()).collect();
    let metrics = MetricsSeries::from_events(&logs, cfg.duration_ms);
    Ok(Run {
        config: cfg.clone(),
        plan,
        trace_hash: d.net.trace_hash(),
        stats: d.net.stats().clone(),
        ddos_end: d.ddos_end,
        nodes,
        engines: d.engines,
        metrics,
    })
}

/// Run and audit a batch in parallel; each scenario is isolated.
pub fn run_batch(cfgs: &[ScenarioConfig]) -> Vec<Result<RunSummary, ConfigError>> {
    cfgs.par_iter()
        .map(|c| {
            let run = run_scenario(c)?;
            let report = run.audit();
            Ok(RunSummary {
                engine: c.engine,
                strategy: c.adversary.strategy,
                n: c.n,
                seed: c.seed,
                trace_hash: run.trace_hash,
                committed_leaders: run
                    .correct()
                    .map(|n| n.events.iter().filter(|(_, e)| matches!(e, MetricEvent::LeaderCommitted { .. })).count())
                    .min()
                    .unwrap_or(0),
                report,
            })
        })
        .collect()
}
