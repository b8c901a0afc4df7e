//! Message transport: a deterministic discrete-event simulator and a
//! best-effort UDP transport for running nodes as real processes.

mod sim;
mod trace;
pub mod udp;

pub use sim::{ClientDelivery, SimOutput, SimStats, Simulator};
pub use trace::{read_trace, write_trace, TraceKind, TraceRecord};

use serde::{Deserialize, Serialize};

use crate::node::Addr;
use crate::wire::KvOp;

/// Simulated time in nanoseconds.
pub type SimTime = u64;

pub const NANOS_PER_MICRO: u64 = 1_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(Addr),

    #[error("endpoint {0} registered twice")]
    DuplicateEndpoint(Addr),

    #[error("simulation exceeded {0} events")]
    Runaway(u64),

    #[error("cannot schedule at {at} ns, simulation clock is already at {now} ns")]
    InThePast { at: SimTime, now: SimTime },

    #[error("frame encoding failed: {0}")]
    Encode(String),
}

/// Per-hop cost model.
///
/// An unloaded hop takes `propagation_ns + per_byte_ns·len + per_packet_proc_ns`.
/// The last two terms are also how long the message occupies the processing
/// resource selected by [`ProcessingModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    pub propagation_ns: u64,
    pub per_byte_ns: u64,
    pub per_packet_proc_ns: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            propagation_ns: 10_000,
            per_byte_ns: 10,
            per_packet_proc_ns: 1_000,
        }
    }
}

impl LinkModel {
    pub const ZERO: LinkModel = LinkModel {
        propagation_ns: 0,
        per_byte_ns: 0,
        per_packet_proc_ns: 0,
    };

    /// Time a message of `len` bytes keeps its processing resource busy.
    pub fn service_ns(&self, len: usize) -> u64 {
        self.per_packet_proc_ns + self.per_byte_ns * len as u64
    }

    pub fn unloaded_hop_ns(&self, len: usize) -> u64 {
        self.propagation_ns + self.service_ns(len)
    }
}

/// Which resource serialises message processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProcessingModel {
    /// Every delivery has its own server; no queueing anywhere.
    Unlimited,
    /// Each chain node processes one message at a time; clients are free.
    PerNode,
    /// All endpoints share one processor, as when a whole topology is
    /// emulated on a single machine.
    #[default]
    SharedHost,
}

/// Which packets a fault rule applies to. `None` fields match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PacketMatch {
    pub src: Option<Addr>,
    pub dst: Option<Addr>,
    pub op: Option<KvOp>,
}

impl PacketMatch {
    pub fn matches(&self, src: Addr, dst: Addr, op: KvOp) -> bool {
        self.src.is_none_or(|s| s == src)
            && self.dst.is_none_or(|d| d == dst)
            && self.op.is_none_or(|o| o == op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    /// Drop the k-th matching packet (1-based).
    DropNth(u64),
    /// Drop each matching packet with this probability, using the
    /// simulator's seeded generator.
    DropWithProbability(f64),
    DropAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultRule {
    #[serde(rename = "match")]
    pub packet: PacketMatch,
    pub action: FaultAction,
}

impl FaultRule {
    pub fn drop_nth(packet: PacketMatch, k: u64) -> Self {
        Self {
            packet,
            action: FaultAction::DropNth(k),
        }
    }

    pub fn drop_all(packet: PacketMatch) -> Self {
        Self {
            packet,
            action: FaultAction::DropAll,
        }
    }
}
