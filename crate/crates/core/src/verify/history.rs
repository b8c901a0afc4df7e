use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::net::{SimTime, TraceKind, TraceRecord};
use crate::wire::KvOp;

/// Version tag carried in the upper 64 bits of a written value.
pub fn version_of(value: u128) -> u64 {
    (value >> 64) as u64
}

/// Builds a value whose upper half is `version` and lower half `payload`.
pub fn tagged_value(version: u64, payload: u64) -> u128 {
    ((version as u128) << 64) | payload as u128
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// A read completed and returned this version tag.
    Returned(u64),
    /// A write was acknowledged to its client.
    Acked,
    /// The system explicitly discarded the operation.
    Dropped,
    /// No response was observed.
    TimedOut,
}

/// One client operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Unique operation id (the simulator tag).
    pub id: u64,
    pub client: u32,
    pub kind: OpKind,
    pub key: u32,
    /// Version written; ignored for reads.
    pub version: u64,
    pub invoke: SimTime,
    pub complete: Option<SimTime>,
    pub outcome: Outcome,
}

impl HistoryEntry {
    pub fn write(id: u64, client: u32, key: u32, version: u64, invoke: SimTime) -> Self {
        Self {
            id,
            client,
            kind: OpKind::Write,
            key,
            version,
            invoke,
            complete: None,
            outcome: Outcome::TimedOut,
        }
    }

    pub fn read(id: u64, client: u32, key: u32, invoke: SimTime) -> Self {
        Self {
            id,
            client,
            kind: OpKind::Read,
            key,
            version: 0,
            invoke,
            complete: None,
            outcome: Outcome::TimedOut,
        }
    }

    pub fn acked(mut self, at: SimTime) -> Self {
        self.complete = Some(at);
        self.outcome = Outcome::Acked;
        self
    }

    pub fn returned(mut self, version: u64, at: SimTime) -> Self {
        self.complete = Some(at);
        self.outcome = Outcome::Returned(version);
        self
    }

    pub fn dropped(mut self) -> Self {
        self.outcome = Outcome::Dropped;
        self
    }

    /// Version observed by a completed read.
    pub fn observed(&self) -> Option<u64> {
        match self.outcome {
            Outcome::Returned(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HistoryError {
    #[error("operation {0} appears twice")]
    DuplicateId(u64),

    #[error("key {key}: version {version} is written by more than one operation")]
    DuplicateVersion { key: u32, version: u64 },

    #[error("operation {0} writes the reserved initial version 0")]
    ZeroVersion(u64),

    #[error("operation {0} completes before it is invoked")]
    CompletesBeforeInvoke(u64),

    #[error("operation {id}: outcome {outcome} does not fit a {kind:?}")]
    OutcomeMismatch {
        id: u64,
        kind: OpKind,
        outcome: &'static str,
    },

    #[error("operation {0} has a completion outcome but no completion time")]
    MissingCompletion(u64),

    #[error("key {key} has {count} operations, the exhaustive oracle accepts at most {limit}")]
    OracleLimit { key: u32, count: usize, limit: usize },
}

/// Checks the structural rules every history must satisfy.
pub fn validate(history: &[HistoryEntry]) -> Result<(), HistoryError> {
    let mut ids = std::collections::BTreeSet::new();
    let mut versions = std::collections::BTreeSet::new();
    for e in history {
        if !ids.insert(e.id) {
            return Err(HistoryError::DuplicateId(e.id));
        }
        let mismatch = |outcome| HistoryError::OutcomeMismatch {
            id: e.id,
            kind: e.kind,
            outcome,
        };
        match (e.kind, e.outcome) {
            (OpKind::Read, Outcome::Acked) => return Err(mismatch("acked")),
            (OpKind::Write, Outcome::Returned(_)) => return Err(mismatch("returned")),
            _ => {}
        }
        if matches!(e.outcome, Outcome::Acked | Outcome::Returned(_)) && e.complete.is_none() {
            return Err(HistoryError::MissingCompletion(e.id));
        }
        if let Some(c) = e.complete {
            if c < e.invoke {
                return Err(HistoryError::CompletesBeforeInvoke(e.id));
            }
        }
        if e.kind == OpKind::Write {
            if e.version == 0 {
                return Err(HistoryError::ZeroVersion(e.id));
            }
            if !versions.insert((e.key, e.version)) {
                return Err(HistoryError::DuplicateVersion {
                    key: e.key,
                    version: e.version,
                });
            }
        }
    }
    Ok(())
}

/// Groups operations by key, preserving input order within a key.
pub fn by_key(history: &[HistoryEntry]) -> BTreeMap<u32, Vec<&HistoryEntry>> {
    let mut out: BTreeMap<u32, Vec<&HistoryEntry>> = BTreeMap::new();
    for e in history {
        out.entry(e.key).or_default().push(e);
    }
    out
}

/// Rebuilds client operations from a simulator trace.
///
/// A client request is a READ or WRITE whose source is its own reply-to
/// address; its completion is the first READ_REPLY or ACK delivered back to
/// that address with the same tag. Writes rejected by a node or removed by a
/// fault rule are `Dropped`; anything else without a reply is `TimedOut`.
pub fn history_from_trace(records: &[TraceRecord]) -> Vec<HistoryEntry> {
    let mut ops: BTreeMap<u64, HistoryEntry> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let request = matches!(r.op, KvOp::Read | KvOp::Write);
        if request && r.src == r.reply_to && !ops.contains_key(&r.tag) {
            let entry = if r.op == KvOp::Write {
                HistoryEntry::write(r.tag, r.reply_to.0, r.key, version_of(r.value), r.sent)
            } else {
                HistoryEntry::read(r.tag, r.reply_to.0, r.key, r.sent)
            };
            ops.insert(r.tag, entry);
            order.push(r.tag);
        }
        let Some(entry) = ops.get_mut(&r.tag) else {
            continue;
        };
        if entry.complete.is_some() {
            continue;
        }
        match r.kind {
            TraceKind::Deliver if r.dst == r.reply_to => match (entry.kind, r.op) {
                (OpKind::Read, KvOp::ReadReply) => {
                    entry.complete = Some(r.time);
                    entry.outcome = Outcome::Returned(version_of(r.value));
                }
                (OpKind::Write, KvOp::Ack) => {
                    entry.complete = Some(r.time);
                    entry.outcome = Outcome::Acked;
                }
                _ => {}
            },
            TraceKind::Reject | TraceKind::FaultDrop if request => {
                entry.outcome = Outcome::Dropped;
            }
            _ => {}
        }
    }
    order.into_iter().filter_map(|t| ops.remove(&t)).collect()
}
