//! Metrics rows for CSV and JSON output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Metrics, SimConfig};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// One CSV row. Column order is part of the output format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub trace: String,
    pub system: String,
    pub workers: u32,
    pub throughput: f64,
    pub normalized_latency: f64,
    pub hit_rate: f64,
    pub nop_count: u64,
    pub relinquish_count: u64,
    pub gpu_idle_fraction: f64,
}

impl MetricsRow {
    pub fn new(trace: &str, cfg: &SimConfig, m: &Metrics) -> Self {
        MetricsRow {
            schema_version: CSV_SCHEMA_VERSION,
            config_hash: cfg.hash(),
            trace: trace.to_string(),
            system: m.system.clone(),
            workers: m.workers,
            throughput: m.throughput,
            normalized_latency: m.normalized_latency,
            hit_rate: m.hit_rate,
            nop_count: m.nop_count,
            relinquish_count: m.relinquish_count,
            gpu_idle_fraction: m.gpu_idle_fraction,
        }
    }
}

pub fn write_csv<W: Write>(w: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
