use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::wire::ProtocolKind;

/// One CSV line of benchmark output. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub protocol: ProtocolKind,
    pub chain_length: usize,
    /// Empty when the row mixes several injection points.
    pub distance_from_tail: Option<usize>,
    pub offered_rate: f64,
    pub completed_qps: f64,
    pub mean_latency_us: f64,
    pub p95_latency_us: f64,
    pub p99_latency_us: f64,
    pub msgs_per_query: f64,
    pub dirty_commits: u64,
    pub drops: u64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "experiment",
    "protocol",
    "chain_length",
    "distance_from_tail",
    "offered_rate",
    "completed_qps",
    "mean_latency_us",
    "p95_latency_us",
    "p99_latency_us",
    "msgs_per_query",
    "dirty_commits",
    "drops",
];

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes `rows` to `path`, header first.
pub fn emit_csv(rows: &[MetricsRow], path: &Path) -> Result<(), BenchError> {
    let file = std::fs::File::create(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    write_csv(std::io::BufWriter::new(file), rows)
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(BenchError::Workload(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
