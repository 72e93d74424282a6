//! `lifefin` — run one simulated scenario, export its metrics, audit it.
//!
//! Exit status is 0 iff the audit passes, 1 if it fails, 2 on bad input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lifefin::adversary::StrategyKind;
use lifefin::harness::{run_scenario, EngineKind, Format, ScenarioConfig};

#[derive(Parser, Debug)]
#[command(name = "lifefin", version, about = "Run a simulated DAG-BFT scenario and audit it")]
struct Args {
    /// TOML scenario file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// certified | uncertified
    #[arg(long)]
    engine: Option<EngineKind>,
    #[arg(long)]
    n: Option<usize>,
    /// Defaults to (n-1)/3 when only --n is given.
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<u64>,
    /// honest | crash | inflation | inflation-ddos | equivocator | phantom-post
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Where to write the per-second metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Disable the fallback.
    #[arg(long)]
    no_lifefin: bool,
    /// Also print the resolved configuration.
    #[arg(long)]
    show_config: bool,
}

fn resolve(a: &Args) -> Result<ScenarioConfig, String> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(e) = a.engine {
        cfg.engine = e;
    }
    if let Some(n) = a.n {
        cfg.n = n;
        cfg.f = a.f.unwrap_or(n.saturating_sub(1) / 3);
    }
    if let Some(f) = a.f {
        cfg.f = f;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.duration {
        cfg.duration_ms = d * 1000;
    }
    if let Some(s) = a.strategy {
        cfg.adversary.strategy = s;
    }
    if a.no_lifefin {
        cfg.fallback.enabled = false;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if args.show_config {
        print!("{}", cfg.to_toml());
    }
    let run = match run_scenario(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(path) = &args.out {
        if let Err(e) = run.metrics.export(args.format, path) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    let report = run.audit();
    println!(
        "engine={} n={} strategy={} seed={} duration={}s",
        cfg.engine.name(),
        cfg.n,
        cfg.adversary.strategy.name(),
        cfg.seed,
        cfg.duration_ms / 1000
    );
    for node in &run.nodes {
        let committed: u64 = run.metrics.node(node.id).iter().map(|r| r.committed_bps).sum();
        println!(
            "node {:>2} {:<9} ordered={:<6} committed_bytes={:<10} fallbacks={} exhausted={}",
            node.id.0,
            if node.correct { "correct" } else { "faulty" },
            node.ordered.len(),
            committed,
            node.fallbacks.len(),
            node.ever_exhausted
        );
    }
    let live = report.liveness.iter().filter(|w| w.live).count();
    println!("liveness windows: {live}/{} live", report.liveness.len());
    println!("trace hash: {}", run.trace_hash);
    if report.passed() {
        println!("audit: PASS");
        ExitCode::SUCCESS
    } else {
        for f in report.failures() {
            println!("audit: FAIL {f}");
        }
        ExitCode::FAILURE
    }
}
