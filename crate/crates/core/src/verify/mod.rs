//! Per-key consistency checking of client histories.
//!
//! A history passes when, for every key, there is a total order of the
//! non-dropped writes (after the initial version 0) such that:
//!
//! * writes acknowledged before another write was invoked come first,
//! * a read invoked after a write's acknowledgement returns that write or a
//!   later one,
//! * each client's successive reads never go backwards,
//! * every read returns a version that exists, was invoked no later than the
//!   read completed, and was not dropped.
//!
//! [`check_per_key`] decides this with a constraint graph; [`oracle`] does the
//! same by exhaustive search on small histories.

mod history;
pub mod oracle;

pub use oracle::brute_force_oracle;
pub use history::{
    by_key, history_from_trace, tagged_value, validate, version_of, HistoryEntry, HistoryError,
    OpKind, Outcome,
};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use petgraph::algo::kosaraju_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::net::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A read returned a version nobody wrote.
    UnknownVersion,
    /// A read returned a version whose write started after the read finished.
    FutureRead,
    /// A read returned the version of a dropped write.
    DroppedVersionRead,
    /// No write order satisfies the ordering constraints.
    OrderCycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub key: u32,
    pub kind: ViolationKind,
    /// Ids of the operations involved.
    pub ops: Vec<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "key {} {:?} ops {:?}: {}",
            self.key, self.kind, self.ops, self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub keys: usize,
    pub ops: usize,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Plain-text report, one violation per line.
    pub fn report(&self) -> String {
        let mut out = format!(
            "{}: {} ops over {} keys, {} violations\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.ops,
            self.keys,
            self.violations.len()
        );
        for v in &self.violations {
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Checks every key of `history` independently.
pub fn check_per_key(history: &[HistoryEntry]) -> Result<Verdict, HistoryError> {
    validate(history)?;
    let groups = by_key(history);
    let mut violations = Vec::new();
    for (&key, ops) in &groups {
        check_key(key, ops, &mut violations);
    }
    Ok(Verdict {
        keys: groups.len(),
        ops: history.len(),
        violations,
    })
}

/// Graph nodes are versions (`Some`) or helper nodes (`None`) that stand for
/// "every version in this prefix", keeping the edge count linear. An edge
/// `a -> b` means `a` is ordered no later than `b`. The history is consistent
/// iff no strongly connected component holds two distinct versions.
fn check_key(key: u32, ops: &[&HistoryEntry], out: &mut Vec<Violation>) {
    let mut g: DiGraph<Option<u64>, u64> = DiGraph::new();
    let mut node_of: HashMap<u64, NodeIndex> = HashMap::new();
    let mut writer: HashMap<u64, &HistoryEntry> = HashMap::new();
    let mut dropped: HashSet<u64> = HashSet::new();

    let init = g.add_node(Some(0));
    node_of.insert(0, init);
    let writes: Vec<&HistoryEntry> = ops
        .iter()
        .copied()
        .filter(|e| e.kind == OpKind::Write)
        .collect();
    for w in &writes {
        if w.outcome == Outcome::Dropped {
            dropped.insert(w.version);
            continue;
        }
        let n = g.add_node(Some(w.version));
        node_of.insert(w.version, n);
        writer.insert(w.version, w);
        g.add_edge(init, n, w.id);
    }

    let mut acked: Vec<&HistoryEntry> = writes
        .iter()
        .copied()
        .filter(|w| w.outcome == Outcome::Acked)
        .collect();
    acked.sort_by_key(|w| (w.complete, w.id));
    let ack_times: Vec<SimTime> = acked.iter().filter_map(|w| w.complete).collect();
    let ack_chain = prefix_chain(&mut g, &acked, &node_of);
    let acked_before = |t: SimTime| ack_times.partition_point(|&a| a < t);

    for w in writes.iter().filter(|w| w.outcome != Outcome::Dropped) {
        let j = acked_before(w.invoke);
        if j > 0 {
            g.add_edge(ack_chain[j - 1], node_of[&w.version], w.id);
        }
    }

    let mut per_client: BTreeMap<u32, Vec<&HistoryEntry>> = BTreeMap::new();
    for r in ops.iter().copied().filter(|e| e.kind == OpKind::Read) {
        let (Some(v), Some(done)) = (r.observed(), r.complete) else {
            continue;
        };
        let Some(&n) = node_of.get(&v) else {
            let (kind, detail) = if dropped.contains(&v) {
                (
                    ViolationKind::DroppedVersionRead,
                    format!("read {} returned dropped version {v}", r.id),
                )
            } else {
                (
                    ViolationKind::UnknownVersion,
                    format!("read {} returned unwritten version {v}", r.id),
                )
            };
            out.push(Violation {
                key,
                kind,
                ops: vec![r.id],
                detail,
            });
            continue;
        };
        if let Some(w) = writer.get(&v) {
            if w.invoke > done {
                out.push(Violation {
                    key,
                    kind: ViolationKind::FutureRead,
                    ops: vec![w.id, r.id],
                    detail: format!(
                        "read {} finished at {done} before write {} of version {v} began at {}",
                        r.id, w.id, w.invoke
                    ),
                });
                continue;
            }
        }
        let j = acked_before(r.invoke);
        if j > 0 {
            g.add_edge(ack_chain[j - 1], n, r.id);
        }
        per_client.entry(r.client).or_default().push(r);
    }

    for reads in per_client.values_mut() {
        reads.sort_by_key(|r| (r.complete, r.id));
        let done: Vec<SimTime> = reads.iter().filter_map(|r| r.complete).collect();
        let observed: Vec<NodeIndex> = reads
            .iter()
            .map(|r| node_of[&r.observed().unwrap_or_default()])
            .collect();
        let chain = prefix_chain_nodes(&mut g, reads, &observed);
        for (r, &n) in reads.iter().zip(&observed) {
            let j = done.partition_point(|&c| c < r.invoke);
            if j > 0 {
                g.add_edge(chain[j - 1], n, r.id);
            }
        }
    }

    for scc in kosaraju_scc(&g) {
        let members: BTreeSet<NodeIndex> = scc.iter().copied().collect();
        let versions: BTreeSet<u64> = scc.iter().filter_map(|&n| g[n]).collect();
        if versions.len() < 2 {
            continue;
        }
        let involved: BTreeSet<u64> = g
            .edge_indices()
            .filter_map(|e| {
                let (a, b) = g.edge_endpoints(e)?;
                (members.contains(&a) && members.contains(&b)).then(|| g[e])
            })
            .collect();
        out.push(Violation {
            key,
            kind: ViolationKind::OrderCycle,
            ops: involved.into_iter().collect(),
            detail: format!("versions {versions:?} must precede each other"),
        });
    }
}

/// Helper chain for writes ordered by acknowledgement time.
fn prefix_chain(
    g: &mut DiGraph<Option<u64>, u64>,
    ordered: &[&HistoryEntry],
    node_of: &HashMap<u64, NodeIndex>,
) -> Vec<NodeIndex> {
    let nodes: Vec<NodeIndex> = ordered.iter().map(|w| node_of[&w.version]).collect();
    prefix_chain_nodes(g, ordered, &nodes)
}

/// Helper node `c[i]` follows the versions of `ordered[..=i]`.
fn prefix_chain_nodes(
    g: &mut DiGraph<Option<u64>, u64>,
    ordered: &[&HistoryEntry],
    versions: &[NodeIndex],
) -> Vec<NodeIndex> {
    let mut chain: Vec<NodeIndex> = Vec::with_capacity(ordered.len());
    for (op, &v) in ordered.iter().zip(versions) {
        let c = g.add_node(None);
        g.add_edge(v, c, op.id);
        if let Some(&prev) = chain.last() {
            g.add_edge(prev, c, op.id);
        }
        chain.push(c);
    }
    chain
}
