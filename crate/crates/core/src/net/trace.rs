use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::SimTime;
use crate::node::Addr;
use crate::wire::{KvOp, ProtocolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// Message reached its destination.
    Deliver,
    /// Removed in flight by a fault rule.
    FaultDrop,
    /// Destination was down when the message arrived.
    Lost,
    /// Destination node handled the frame and answered with a drop action.
    Reject,
    /// Payload failed to decode at the destination.
    Malformed,
}

/// One line of the exported trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: u64,
    /// Delivery (or drop) time.
    pub time: SimTime,
    pub sent: SimTime,
    pub kind: TraceKind,
    pub src: Addr,
    pub dst: Addr,
    pub reply_to: Addr,
    pub tag: u64,
    pub protocol: ProtocolKind,
    pub op: KvOp,
    pub key: u32,
    pub value: u128,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Writes one JSON object per line.
pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("trace line {}: {e}", n + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
