//! Per-second throughput and backlog series.
//!
//! Byte accounting per node: *proposed* is every DAG-path vertex entering the
//! local store, *committed* every DAG-path vertex leaving it through ordering.
//! Vertices carried by the fallback are charged to the reserve and kept out
//! of both, so the backlog (UB) is what the DAG still owes.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Digest, NodeId, Round};
use crate::node::MetricEvent;
use crate::simnet::Millis;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot write metrics: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format {s:?} (csv|json)")),
        }
    }
}

/// One CSV row. Column order is part of the output contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub t_sec: u64,
    pub node: u32,
    pub committed_bps: u64,
    pub proposed_bps: u64,
    pub cumulative_ub: i64,
    pub fallback_active: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitLatency {
    pub node: NodeId,
    pub round: Round,
    pub leader: NodeId,
    pub latency_ms: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub t_ms: Millis,
    pub node: NodeId,
    pub what: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSeries {
    /// `rows[node][second]`.
    pub rows: Vec<Vec<Row>>,
    pub latencies: Vec<CommitLatency>,
    pub markers: Vec<Marker>,
}

impl MetricsSeries {
    /// Bucket the event logs of every node over `[0, duration]`.
    pub fn from_events(logs: &[Vec<(Millis, MetricEvent)>], duration: Millis) -> Self {
        let secs = duration.div_ceil(1000).max(1) as usize;
        let bucket = |t: Millis| ((t / 1000) as usize).min(secs - 1);
        let mut created: HashMap<Digest, Millis> = HashMap::new();
        for log in logs {
            for (t, e) in log {
                if let MetricEvent::VertexCreated { vertex, .. } = e {
                    created.entry(vertex.digest).or_insert(*t);
                }
            }
        }
        let mut out = MetricsSeries::default();
        for (i, log) in logs.iter().enumerate() {
            let node = NodeId(i as u32);
            let mut committed = vec![0u64; secs];
            let mut proposed = vec![0u64; secs];
            let mut active = vec![false; secs];
            let mut fb_since: Option<Millis> = None;
            for (t, e) in log {
                let b = bucket(*t);
                match e {
                    MetricEvent::VertexAccepted { bytes, fallback: false, .. } => proposed[b] += bytes,
                    MetricEvent::VertexOrdered { bytes, fallback: false, .. } => committed[b] += bytes,
                    MetricEvent::LeaderCommitted { leader, .. } => {
                        if let Some(c) = created.get(&leader.digest) {
                            out.latencies.push(CommitLatency {
                                node,
                                round: leader.round,
                                leader: leader.creator,
                                latency_ms: t - c,
                            });
                        }
                    }
                    MetricEvent::FallbackTriggered { view, reason } => {
                        fb_since.get_or_insert(*t);
                        out.markers.push(Marker {
                            t_ms: *t,
                            node,
                            what: format!("fallback_triggered view={view} reason={reason:?}"),
                        });
                    }
                    MetricEvent::AcsDecided { view, blocks, bytes_used } => out.markers.push(Marker {
                        t_ms: *t,
                        node,
                        what: format!("acs_decided view={view} blocks={} bytes={bytes_used}", blocks.len()),
                    }),
                    MetricEvent::FallbackLeader { round, creator, predefined } => out.markers.push(Marker {
                        t_ms: *t,
                        node,
                        what: format!(
                            "fallback_leader round={round} creator={creator} {}",
                            if *predefined { "predefined" } else { "reassigned" }
                        ),
                    }),
                    MetricEvent::FallbackFinalized { .. } => {
                        if let Some(s) = fb_since.take() {
                            active[bucket(s)..=b].iter_mut().for_each(|a| *a = true);
                        }
                    }
                    MetricEvent::Exhausted => out.markers.push(Marker {
                        t_ms: *t,
                        node,
                        what: "exhausted".into(),
                    }),
                    _ => {}
                }
            }
            if let Some(s) = fb_since {
                active[bucket(s)..].iter_mut().for_each(|a| *a = true);
            }
            let mut ub = 0i64;
            let rows = (0..secs)
                .map(|s| {
                    ub += proposed[s] as i64 - committed[s] as i64;
                    Row {
                        t_sec: s as u64,
                        node: node.0,
                        committed_bps: committed[s],
                        proposed_bps: proposed[s],
                        cumulative_ub: ub,
                        fallback_active: active[s],
                    }
                })
                .collect();
            out.rows.push(rows);
        }
        out
    }

    pub fn node(&self, n: NodeId) -> &[Row] {
        &self.rows[n.index()]
    }

    /// Rows ordered by second, then node.
    pub fn flat(&self) -> Vec<Row> {
        let secs = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(secs * self.rows.len());
        for s in 0..secs {
            for r in &self.rows {
                if let Some(row) = r.get(s) {
                    out.push(row.clone());
                }
            }
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), ExportError> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(["t_sec", "node", "committed_bps", "proposed_bps", "cumulative_ub", "fallback_active"])?;
        for row in self.flat() {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_json(&self, mut w: impl Write) -> Result<(), ExportError> {
        serde_json::to_writer_pretty(&mut w, &self.flat())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn export(&self, format: Format, path: &std::path::Path) -> Result<(), ExportError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match format {
            Format::Csv => self.write_csv(f),
            Format::Json => self.write_json(f),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn read_csv(r: impl Read) -> Result<Vec<Row>, ExportError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_json(r: impl Read) -> Result<Vec<Row>, ExportError> {
    Ok(serde_json::from_reader(r)?)
}
