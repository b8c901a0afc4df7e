//! Binary codecs for the two chain protocols.
//!
//! The compact header carries only what a node cannot look up locally:
//!
//! ```text
//! ┌────────┬──────────────┬──────────────────┐
//! │ op 1B  │ key_id 4B BE │ value 16B BE     │   21 bytes
//! └────────┴──────────────┴──────────────────┘
//! ```
//!
//! `op` uses the two low bits of the first byte; the upper six bits are
//! reserved and must be zero.
//!
//! The baseline header embeds the chain itself, so it grows with every node:
//!
//! ```text
//! ┌───────┬────────┬──────────┬────────┬───────┬───────────┬──────────────┐
//! │ op 1B │ key 4B │ value 16B│ seq 2B │ sc 1B │ cursor 1B │ nodes sc×4B  │
//! └───────┴────────┴──────────┴────────┴───────┴───────────┴──────────────┘
//! ```
//!
//! All multi-byte integers are big-endian.

use serde::{Deserialize, Serialize};

/// Encoded size of a compact frame.
pub const NETCRAQ_FRAME_LEN: usize = 21;

/// Fixed part of a baseline frame, before the node list.
pub const BASELINE_FIXED_LEN: usize = 25;

/// Bytes added to a baseline frame by each chain node.
pub const BASELINE_BYTES_PER_NODE: usize = 4;

/// Largest node list a baseline frame can carry (`sc` is one byte).
pub const BASELINE_MAX_NODES: usize = u8::MAX as usize;

const OP_MASK: u8 = 0b0000_0011;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("malformed frame: expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },

    #[error("malformed frame: truncated, need at least {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },

    #[error("malformed frame: reserved bits set in op byte 0x{0:02X}")]
    ReservedBits(u8),

    #[error("malformed frame: unknown op code {0}")]
    UnknownOp(u8),

    #[error("malformed frame: cursor {cursor} beyond node count {sc}")]
    CursorOutOfRange { cursor: u8, sc: u8 },

    #[error("baseline frame carries {0} nodes, limit is {BASELINE_MAX_NODES}")]
    TooManyNodes(usize),
}

/// Key-value operation code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KvOp {
    Read = 0,
    ReadReply = 1,
    Write = 2,
    Ack = 3,
}

impl KvOp {
    pub const ALL: [KvOp; 4] = [KvOp::Read, KvOp::ReadReply, KvOp::Write, KvOp::Ack];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(KvOp::Read),
            1 => Ok(KvOp::ReadReply),
            2 => Ok(KvOp::Write),
            3 => Ok(KvOp::Ack),
            other => Err(WireError::UnknownOp(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KvOp::Read => "READ",
            KvOp::ReadReply => "READ_REPLY",
            KvOp::Write => "WRITE",
            KvOp::Ack => "ACK",
        }
    }
}

impl std::fmt::Display for KvOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which header a chain speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Compact header, apportioned reads, multicast acknowledgements.
    Netcraq,
    /// Chain list in the header, tail-only reads.
    Baseline,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Netcraq => "netcraq",
            ProtocolKind::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "netcraq" => Ok(ProtocolKind::Netcraq),
            "baseline" | "netchain" => Ok(ProtocolKind::Baseline),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// The three-field compact frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetcraqFrame {
    pub op: KvOp,
    pub key_id: u32,
    pub value: u128,
}

impl NetcraqFrame {
    pub fn new(op: KvOp, key_id: u32, value: u128) -> Self {
        Self { op, key_id, value }
    }

    pub fn with_op(self, op: KvOp) -> Self {
        Self { op, ..self }
    }
}

/// Baseline frame with the chain's node addresses embedded.
///
/// `sc` is not stored separately: it is always `nodes.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineFrame {
    pub op: KvOp,
    pub key: u32,
    pub value: u128,
    pub seq: u16,
    pub nodes: Vec<u32>,
    pub cursor: u8,
}

impl BaselineFrame {
    pub fn sc(&self) -> usize {
        self.nodes.len()
    }

    pub fn encoded_len(&self) -> usize {
        baseline_len(self.nodes.len())
    }
}

fn baseline_len(sc: usize) -> usize {
    BASELINE_FIXED_LEN + BASELINE_BYTES_PER_NODE * sc
}

pub fn encode_netcraq(frame: &NetcraqFrame) -> [u8; NETCRAQ_FRAME_LEN] {
    let mut out = [0u8; NETCRAQ_FRAME_LEN];
    out[0] = frame.op.code() & OP_MASK;
    out[1..5].copy_from_slice(&frame.key_id.to_be_bytes());
    out[5..21].copy_from_slice(&frame.value.to_be_bytes());
    out
}

pub fn decode_netcraq(bytes: &[u8]) -> Result<NetcraqFrame, WireError> {
    if bytes.len() != NETCRAQ_FRAME_LEN {
        return Err(WireError::BadLength {
            expected: NETCRAQ_FRAME_LEN,
            got: bytes.len(),
        });
    }
    if bytes[0] & !OP_MASK != 0 {
        return Err(WireError::ReservedBits(bytes[0]));
    }
    let op = KvOp::from_code(bytes[0])?;
    let key_id = u32::from_be_bytes(bytes[1..5].try_into().expect("4-byte slice"));
    let value = u128::from_be_bytes(bytes[5..21].try_into().expect("16-byte slice"));
    Ok(NetcraqFrame { op, key_id, value })
}

pub fn encode_baseline(frame: &BaselineFrame) -> Result<Vec<u8>, WireError> {
    let sc = frame.nodes.len();
    if sc > BASELINE_MAX_NODES {
        return Err(WireError::TooManyNodes(sc));
    }
    if usize::from(frame.cursor) > sc {
        return Err(WireError::CursorOutOfRange {
            cursor: frame.cursor,
            sc: sc as u8,
        });
    }
    let mut out = Vec::with_capacity(baseline_len(sc));
    out.push(frame.op.code());
    out.extend_from_slice(&frame.key.to_be_bytes());
    out.extend_from_slice(&frame.value.to_be_bytes());
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.push(sc as u8);
    out.push(frame.cursor);
    for node in &frame.nodes {
        out.extend_from_slice(&node.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_baseline(bytes: &[u8]) -> Result<BaselineFrame, WireError> {
    if bytes.len() < BASELINE_FIXED_LEN {
        return Err(WireError::Truncated {
            need: BASELINE_FIXED_LEN,
            got: bytes.len(),
        });
    }
    let op = KvOp::from_code(bytes[0])?;
    let key = u32::from_be_bytes(bytes[1..5].try_into().expect("4-byte slice"));
    let value = u128::from_be_bytes(bytes[5..21].try_into().expect("16-byte slice"));
    let seq = u16::from_be_bytes([bytes[21], bytes[22]]);
    let sc = bytes[23];
    let cursor = bytes[24];
    let expected = baseline_len(usize::from(sc));
    if bytes.len() != expected {
        return Err(WireError::BadLength {
            expected,
            got: bytes.len(),
        });
    }
    if cursor > sc {
        return Err(WireError::CursorOutOfRange { cursor, sc });
    }
    let nodes = bytes[BASELINE_FIXED_LEN..]
        .chunks_exact(BASELINE_BYTES_PER_NODE)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(BaselineFrame {
        op,
        key,
        value,
        seq,
        nodes,
        cursor,
    })
}

/// Application-header size for a chain of `chain_length` nodes.
pub fn overhead_bytes(kind: ProtocolKind, chain_length: usize) -> usize {
    match kind {
        ProtocolKind::Netcraq => NETCRAQ_FRAME_LEN,
        ProtocolKind::Baseline => baseline_len(chain_length),
    }
}

/// A decoded frame of either protocol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Netcraq(NetcraqFrame),
    Baseline(BaselineFrame),
}

impl Frame {
    pub fn op(&self) -> KvOp {
        match self {
            Frame::Netcraq(f) => f.op,
            Frame::Baseline(f) => f.op,
        }
    }

    pub fn key(&self) -> u32 {
        match self {
            Frame::Netcraq(f) => f.key_id,
            Frame::Baseline(f) => f.key,
        }
    }

    pub fn value(&self) -> u128 {
        match self {
            Frame::Netcraq(f) => f.value,
            Frame::Baseline(f) => f.value,
        }
    }

    pub fn protocol(&self) -> ProtocolKind {
        match self {
            Frame::Netcraq(_) => ProtocolKind::Netcraq,
            Frame::Baseline(_) => ProtocolKind::Baseline,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Netcraq(_) => NETCRAQ_FRAME_LEN,
            Frame::Baseline(f) => f.encoded_len(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        match self {
            Frame::Netcraq(f) => Ok(encode_netcraq(f).to_vec()),
            Frame::Baseline(f) => encode_baseline(f),
        }
    }

    pub fn decode(kind: ProtocolKind, bytes: &[u8]) -> Result<Self, WireError> {
        match kind {
            ProtocolKind::Netcraq => decode_netcraq(bytes).map(Frame::Netcraq),
            ProtocolKind::Baseline => decode_baseline(bytes).map(Frame::Baseline),
        }
    }
}
