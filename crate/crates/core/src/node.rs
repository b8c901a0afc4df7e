//! Per-node protocol state machines.
//!
//! A [`Node`] consumes one decoded frame at a time and answers with a list of
//! [`Action`]s for the transport to carry out. Nodes never talk to each other
//! directly and never pick their own role; both come from the controller
//! through [`RoleUpdate`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::store::{AppendOutcome, ObjectState, ObjectStore, StoreConfig, StoreError};
use crate::wire::{BaselineFrame, Frame, KvOp, NetcraqFrame, ProtocolKind};

/// 32-bit endpoint address, used both for chain nodes and clients.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Addr(pub u32);

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeRole {
    Head,
    Replica,
    Tail,
}

/// Largest sequence number the baseline header can carry.
pub const MAX_SEQ: u32 = u16::MAX as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// No free pending slot for the key.
    Overflow,
    /// Op code the node does not handle in its current protocol.
    UnexpectedOp,
    KeyOutOfRange,
    WritesDisabled,
    /// Head ran out of 16-bit sequence numbers.
    SequenceExhausted,
    StaleSequence,
    /// Baseline write reached a non-head node without a sequence number.
    Unsequenced,
    CursorOutOfRange,
    ProtocolMismatch,
    /// Node has no successor to forward to.
    NoRoute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Unicast to another chain node; the transport keeps the original
    /// client as reply-to.
    Send { dest: Addr, frame: Frame },
    /// One copy per multicast member, in member order.
    Multicast { frame: Frame },
    Reply { client: Addr, frame: Frame },
    Drop { reason: DropReason },
}

/// Metadata the controller installs on a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeContext {
    pub my_id: Addr,
    pub role: NodeRole,
    pub tail: Addr,
    pub successor: Option<Addr>,
    pub multicast_members: Vec<Addr>,
    pub epoch: u64,
    pub writes_enabled: bool,
}

/// Controller-issued replacement for everything in [`NodeContext`] except
/// the node's own identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUpdate {
    pub epoch: u64,
    pub role: NodeRole,
    pub tail: Addr,
    pub successor: Option<Addr>,
    pub multicast_members: Vec<Addr>,
    pub writes_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NodeError {
    #[error("stale role update: epoch {update} < installed {installed}")]
    StaleEpoch { update: u64, installed: u64 },

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub clean_reads: u64,
    pub tail_dirty_reads: u64,
    pub forwarded_reads: u64,
    /// Versions appended while the object was clean.
    pub clean_writes: u64,
    /// Versions appended while the object already held a pending version.
    pub dirty_commits: u64,
    pub tail_commits: u64,
    pub acks_applied: u64,
    pub drops: BTreeMap<DropReason, u64>,
}

impl NodeMetrics {
    pub fn drop_count(&self, reason: DropReason) -> u64 {
        self.drops.get(&reason).copied().unwrap_or(0)
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.values().sum()
    }

    /// Every store mutation a WRITE caused on this node.
    /// Writes stored by this node, pending or final, excluding ACKs.
    pub fn write_commits(&self) -> u64 {
        self.clean_writes + self.dirty_commits + self.tail_commits
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SequenceState {
    /// Next number the head hands out; 0 is reserved for "unassigned".
    next: u32,
    last_seen: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct Node {
    ctx: NodeContext,
    protocol: ProtocolKind,
    store: ObjectStore,
    seq: SequenceState,
    metrics: NodeMetrics,
}

impl Node {
    pub fn new(
        ctx: NodeContext,
        protocol: ProtocolKind,
        store: StoreConfig,
    ) -> Result<Self, NodeError> {
        validate_context(&ctx)?;
        let store = ObjectStore::new(store)?;
        let keys = store.config().num_keys as usize;
        Ok(Self {
            ctx,
            protocol,
            store,
            seq: SequenceState {
                next: 1,
                last_seen: vec![0; keys],
            },
            metrics: NodeMetrics::default(),
        })
    }

    pub fn ctx(&self) -> &NodeContext {
        &self.ctx
    }

    pub fn addr(&self) -> Addr {
        self.ctx.my_id
    }

    pub fn role(&self) -> NodeRole {
        self.ctx.role
    }

    pub fn protocol(&self) -> ProtocolKind {
        self.protocol
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn metrics(&self) -> &NodeMetrics {
        &self.metrics
    }

    /// Replaces the local store, as done when a recovering node receives a
    /// donor snapshot.
    pub fn install_store(&mut self, store: ObjectStore) -> Result<(), NodeError> {
        if store.config() != self.store.config() {
            return Err(NodeError::InvalidContext(
                "snapshot has a different store shape".into(),
            ));
        }
        self.store = store;
        Ok(())
    }

    /// Installs a controller update. Updates older than the installed epoch
    /// are refused and leave the context untouched.
    pub fn apply_role_update(&mut self, update: RoleUpdate) -> Result<(), NodeError> {
        if update.epoch < self.ctx.epoch {
            return Err(NodeError::StaleEpoch {
                update: update.epoch,
                installed: self.ctx.epoch,
            });
        }
        let next = NodeContext {
            my_id: self.ctx.my_id,
            role: update.role,
            tail: update.tail,
            successor: update.successor,
            multicast_members: update.multicast_members,
            epoch: update.epoch,
            writes_enabled: update.writes_enabled,
        };
        validate_context(&next)?;
        if next.role == NodeRole::Head && self.ctx.role != NodeRole::Head {
            // Continue above every number seen so downstream nodes do not
            // treat the new head's writes as stale.
            let seen = self.seq.last_seen.iter().copied().max().unwrap_or(0);
            self.seq.next = self.seq.next.max(u32::from(seen) + 1);
        }
        self.ctx = next;
        Ok(())
    }

    /// Commits the newest pending version of every dirty key and announces
    /// it to the rest of the chain. Run by a node that has just been
    /// promoted to tail, since the old tail can no longer acknowledge.
    pub fn flush_pending_as_tail(&mut self) -> Vec<Action> {
        if self.protocol != ProtocolKind::Netcraq || self.ctx.role != NodeRole::Tail {
            return Vec::new();
        }
        let dirty: Vec<u32> = self.store.dirty_keys().collect();
        let mut actions = Vec::with_capacity(dirty.len());
        for key in dirty {
            let value = self
                .store
                .read_latest_any(key)
                .expect("dirty key is in range");
            self.store.commit_clean(key, value).expect("key in range");
            self.metrics.tail_commits += 1;
            actions.push(Action::Multicast {
                frame: Frame::Netcraq(NetcraqFrame::new(KvOp::Ack, key, value)),
            });
        }
        actions
    }

    pub fn handle(&mut self, frame: &Frame, client: Addr) -> Vec<Action> {
        match (self.protocol, frame) {
            (ProtocolKind::Netcraq, Frame::Netcraq(f)) => self.handle_netcraq(*f, client),
            (ProtocolKind::Baseline, Frame::Baseline(f)) => self.handle_baseline(f.clone(), client),
            _ => self.drop(DropReason::ProtocolMismatch),
        }
    }

    pub fn handle_netcraq(&mut self, frame: NetcraqFrame, client: Addr) -> Vec<Action> {
        let key = frame.key_id;
        let state = match self.store.state_of(key) {
            Ok(s) => s,
            Err(_) => return self.drop(DropReason::KeyOutOfRange),
        };
        match frame.op {
            KvOp::Read => match (state, self.ctx.role) {
                (ObjectState::Clean, _) => {
                    self.metrics.clean_reads += 1;
                    let value = self.store.read_latest_clean(key).expect("key checked");
                    vec![Action::Reply {
                        client,
                        frame: Frame::Netcraq(NetcraqFrame::new(KvOp::ReadReply, key, value)),
                    }]
                }
                (ObjectState::Dirty, NodeRole::Tail) => {
                    self.metrics.tail_dirty_reads += 1;
                    let value = self.store.read_latest_any(key).expect("key checked");
                    vec![Action::Reply {
                        client,
                        frame: Frame::Netcraq(NetcraqFrame::new(KvOp::ReadReply, key, value)),
                    }]
                }
                (ObjectState::Dirty, _) => {
                    self.metrics.forwarded_reads += 1;
                    vec![Action::Send {
                        dest: self.ctx.tail,
                        frame: Frame::Netcraq(frame),
                    }]
                }
            },
            KvOp::Write => {
                if !self.ctx.writes_enabled {
                    return self.drop(DropReason::WritesDisabled);
                }
                if self.ctx.role != NodeRole::Tail && self.ctx.successor.is_none() {
                    return self.drop(DropReason::NoRoute);
                }
                match self.store.append_pending(key, frame.value).expect("key checked") {
                    AppendOutcome::Dropped => return self.drop(DropReason::Overflow),
                    AppendOutcome::Committed { .. } => match state {
                        ObjectState::Clean => self.metrics.clean_writes += 1,
                        ObjectState::Dirty => self.metrics.dirty_commits += 1,
                    },
                }
                if self.ctx.role == NodeRole::Tail {
                    self.store.commit_clean(key, frame.value).expect("key checked");
                    self.metrics.tail_commits += 1;
                    let ack = Frame::Netcraq(frame.with_op(KvOp::Ack));
                    vec![
                        Action::Reply {
                            client,
                            frame: ack.clone(),
                        },
                        Action::Multicast { frame: ack },
                    ]
                } else {
                    vec![Action::Send {
                        dest: self.ctx.successor.expect("checked above"),
                        frame: Frame::Netcraq(frame),
                    }]
                }
            }
            KvOp::Ack => {
                self.store.commit_clean(key, frame.value).expect("key checked");
                self.metrics.acks_applied += 1;
                Vec::new()
            }
            KvOp::ReadReply => self.drop(DropReason::UnexpectedOp),
        }
    }

    pub fn handle_baseline(&mut self, mut frame: BaselineFrame, client: Addr) -> Vec<Action> {
        let key = frame.key;
        if key >= self.store.config().num_keys {
            return self.drop(DropReason::KeyOutOfRange);
        }
        let cursor = usize::from(frame.cursor);
        if cursor >= frame.nodes.len() {
            return self.drop(DropReason::CursorOutOfRange);
        }
        match frame.op {
            KvOp::Read => {
                if self.ctx.role == NodeRole::Tail {
                    self.metrics.clean_reads += 1;
                    frame.op = KvOp::ReadReply;
                    frame.value = self.store.read_latest_clean(key).expect("key checked");
                    self.route_back(frame, client)
                } else {
                    self.metrics.forwarded_reads += 1;
                    self.route_forward(frame)
                }
            }
            KvOp::ReadReply => self.route_back(frame, client),
            KvOp::Write => {
                if !self.ctx.writes_enabled {
                    return self.drop(DropReason::WritesDisabled);
                }
                if self.ctx.role == NodeRole::Head {
                    if self.seq.next > MAX_SEQ {
                        return self.drop(DropReason::SequenceExhausted);
                    }
                    frame.seq = self.seq.next as u16;
                    self.seq.next += 1;
                } else if frame.seq == 0 {
                    return self.drop(DropReason::Unsequenced);
                }
                let last = &mut self.seq.last_seen[key as usize];
                if frame.seq < *last {
                    return self.drop(DropReason::StaleSequence);
                }
                *last = frame.seq;
                self.store.commit_clean(key, frame.value).expect("key checked");
                if self.ctx.role == NodeRole::Tail {
                    self.metrics.tail_commits += 1;
                    frame.op = KvOp::Ack;
                    vec![Action::Reply {
                        client,
                        frame: Frame::Baseline(frame),
                    }]
                } else {
                    self.metrics.clean_writes += 1;
                    self.route_forward(frame)
                }
            }
            KvOp::Ack => self.drop(DropReason::UnexpectedOp),
        }
    }

    /// Whether the head has exhausted the 16-bit sequence space.
    pub fn sequence_exhausted(&self) -> bool {
        self.seq.next > MAX_SEQ
    }

    fn route_forward(&mut self, mut frame: BaselineFrame) -> Vec<Action> {
        let next = usize::from(frame.cursor) + 1;
        match frame.nodes.get(next) {
            Some(dest) => {
                let dest = Addr(*dest);
                frame.cursor = next as u8;
                vec![Action::Send {
                    dest,
                    frame: Frame::Baseline(frame),
                }]
            }
            None => self.drop(DropReason::CursorOutOfRange),
        }
    }

    fn route_back(&mut self, mut frame: BaselineFrame, client: Addr) -> Vec<Action> {
        if frame.cursor == 0 {
            return vec![Action::Reply {
                client,
                frame: Frame::Baseline(frame),
            }];
        }
        frame.cursor -= 1;
        let dest = Addr(frame.nodes[usize::from(frame.cursor)]);
        vec![Action::Send {
            dest,
            frame: Frame::Baseline(frame),
        }]
    }

    fn drop(&mut self, reason: DropReason) -> Vec<Action> {
        *self.metrics.drops.entry(reason).or_default() += 1;
        vec![Action::Drop { reason }]
    }
}

fn validate_context(ctx: &NodeContext) -> Result<(), NodeError> {
    if ctx.role == NodeRole::Tail && ctx.successor.is_some() {
        return Err(NodeError::InvalidContext("tail has a successor".into()));
    }
    if ctx.role == NodeRole::Tail && ctx.tail != ctx.my_id {
        return Err(NodeError::InvalidContext(
            "tail must point at itself".into(),
        ));
    }
    if ctx.multicast_members.contains(&ctx.my_id) {
        return Err(NodeError::InvalidContext(
            "multicast group includes the node itself".into(),
        ));
    }
    Ok(())
}

/// Builds the frame a baseline client sends: `path` lists the nodes the
/// request must visit, starting with the node it is addressed to.
pub fn baseline_request(op: KvOp, key: u32, value: u128, path: &[Addr]) -> BaselineFrame {
    BaselineFrame {
        op,
        key,
        value,
        seq: 0,
        nodes: path.iter().map(|a| a.0).collect(),
        cursor: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Addr = Addr(1);
    const B: Addr = Addr(2);
    const C: Addr = Addr(3);
    const D: Addr = Addr(4);
    const CLIENT: Addr = Addr(100);

    fn ctx(me: Addr, role: NodeRole, succ: Option<Addr>) -> NodeContext {
        let all = [A, B, C, D];
        NodeContext {
            my_id: me,
            role,
            tail: D,
            successor: succ,
            multicast_members: all.iter().copied().filter(|a| *a != me && *a != D).collect(),
            epoch: 1,
            writes_enabled: true,
        }
    }

    fn netcraq(me: Addr, role: NodeRole, succ: Option<Addr>, v: u32) -> Node {
        Node::new(
            ctx(me, role, succ),
            ProtocolKind::Netcraq,
            StoreConfig::new(16, v).unwrap(),
        )
        .unwrap()
    }

    fn nf(op: KvOp, key: u32, value: u128) -> Frame {
        Frame::Netcraq(NetcraqFrame::new(op, key, value))
    }

    #[test]
    fn clean_read_answered_locally() {
        let mut b = netcraq(B, NodeRole::Replica, Some(C), 4);
        let out = b.handle(&nf(KvOp::Read, 3, 0), CLIENT);
        assert_eq!(
            out,
            vec![Action::Reply {
                client: CLIENT,
                frame: nf(KvOp::ReadReply, 3, 0)
            }]
        );
    }

    #[test]
    fn dirty_read_forwarded_to_tail() {
        let mut b = netcraq(B, NodeRole::Replica, Some(C), 4);
        b.handle(&nf(KvOp::Write, 3, 9), CLIENT);
        let out = b.handle(&nf(KvOp::Read, 3, 0), CLIENT);
        assert_eq!(
            out,
            vec![Action::Send {
                dest: D,
                frame: nf(KvOp::Read, 3, 0)
            }]
        );
        assert_eq!(b.metrics().forwarded_reads, 1);
    }

    #[test]
    fn tail_answers_dirty_read_with_newest() {
        let mut c = netcraq(C, NodeRole::Replica, Some(D), 4);
        c.handle(&nf(KvOp::Write, 1, 5), CLIENT);
        c.handle(&nf(KvOp::Write, 1, 6), CLIENT);
        c.apply_role_update(RoleUpdate {
            epoch: 2,
            role: NodeRole::Tail,
            tail: C,
            successor: None,
            multicast_members: vec![A, B],
            writes_enabled: true,
        })
        .unwrap();
        let out = c.handle(&nf(KvOp::Read, 1, 0), CLIENT);
        assert_eq!(
            out,
            vec![Action::Reply {
                client: CLIENT,
                frame: nf(KvOp::ReadReply, 1, 6)
            }]
        );
        assert_eq!(c.metrics().tail_dirty_reads, 1);
    }

    #[test]
    fn write_forwards_to_successor_and_tail_acks() {
        let mut a = netcraq(A, NodeRole::Head, Some(B), 4);
        let out = a.handle(&nf(KvOp::Write, 2, 7), CLIENT);
        assert_eq!(
            out,
            vec![Action::Send {
                dest: B,
                frame: nf(KvOp::Write, 2, 7)
            }]
        );
        let mut d = netcraq(D, NodeRole::Tail, None, 4);
        let out = d.handle(&nf(KvOp::Write, 2, 7), CLIENT);
        assert_eq!(
            out,
            vec![
                Action::Reply {
                    client: CLIENT,
                    frame: nf(KvOp::Ack, 2, 7)
                },
                Action::Multicast {
                    frame: nf(KvOp::Ack, 2, 7)
                }
            ]
        );
        assert_eq!(d.store().state_of(2).unwrap(), ObjectState::Clean);
        assert_eq!(d.store().read_latest_clean(2).unwrap(), 7);
    }

    #[test]
    fn ack_cleans_object() {
        let mut b = netcraq(B, NodeRole::Replica, Some(C), 4);
        b.handle(&nf(KvOp::Write, 2, 7), CLIENT);
        b.handle(&nf(KvOp::Write, 2, 8), CLIENT);
        assert_eq!(b.metrics().dirty_commits, 1);
        assert!(b.handle(&nf(KvOp::Ack, 2, 8), D).is_empty());
        assert_eq!(b.store().state_of(2).unwrap(), ObjectState::Clean);
        let out = b.handle(&nf(KvOp::Read, 2, 0), CLIENT);
        assert_eq!(
            out,
            vec![Action::Reply {
                client: CLIENT,
                frame: nf(KvOp::ReadReply, 2, 8)
            }]
        );
    }

    #[test]
    fn overflow_drops_write() {
        let mut a = netcraq(A, NodeRole::Head, Some(B), 4);
        for v in 1..=3 {
            assert!(matches!(
                a.handle(&nf(KvOp::Write, 0, v), CLIENT)[0],
                Action::Send { .. }
            ));
        }
        assert_eq!(
            a.handle(&nf(KvOp::Write, 0, 4), CLIENT),
            vec![Action::Drop {
                reason: DropReason::Overflow
            }]
        );
        assert_eq!(a.metrics().drop_count(DropReason::Overflow), 1);
    }

    #[test]
    fn bad_key_and_unexpected_op_dropped() {
        let mut a = netcraq(A, NodeRole::Head, Some(B), 4);
        assert_eq!(
            a.handle(&nf(KvOp::Read, 99, 0), CLIENT),
            vec![Action::Drop {
                reason: DropReason::KeyOutOfRange
            }]
        );
        assert_eq!(a.metrics().drop_count(DropReason::KeyOutOfRange), 1);
        assert_eq!(
            a.handle(&nf(KvOp::ReadReply, 1, 0), CLIENT),
            vec![Action::Drop {
                reason: DropReason::UnexpectedOp
            }]
        );
    }

    #[test]
    fn writes_disabled_rejects() {
        let mut a = netcraq(A, NodeRole::Head, Some(B), 4);
        let mut update = RoleUpdate {
            epoch: 2,
            role: NodeRole::Head,
            tail: D,
            successor: Some(B),
            multicast_members: vec![B, C],
            writes_enabled: false,
        };
        a.apply_role_update(update.clone()).unwrap();
        assert_eq!(
            a.handle(&nf(KvOp::Write, 0, 1), CLIENT),
            vec![Action::Drop {
                reason: DropReason::WritesDisabled
            }]
        );
        assert_eq!(a.metrics().write_commits(), 0);
        update.writes_enabled = true;
        a.apply_role_update(update).unwrap();
        assert!(matches!(
            a.handle(&nf(KvOp::Write, 0, 1), CLIENT)[0],
            Action::Send { .. }
        ));
    }

    #[test]
    fn stale_update_refused_identity_update_noop() {
        let mut b = netcraq(B, NodeRole::Replica, Some(C), 4);
        let before = b.ctx().clone();
        let same = RoleUpdate {
            epoch: before.epoch,
            role: before.role,
            tail: before.tail,
            successor: before.successor,
            multicast_members: before.multicast_members.clone(),
            writes_enabled: true,
        };
        b.apply_role_update(same).unwrap();
        assert_eq!(b.ctx(), &before);
        let stale = RoleUpdate {
            epoch: 0,
            role: NodeRole::Tail,
            tail: B,
            successor: None,
            multicast_members: vec![],
            writes_enabled: true,
        };
        assert!(matches!(
            b.apply_role_update(stale),
            Err(NodeError::StaleEpoch { .. })
        ));
        assert_eq!(b.ctx(), &before);
    }

    #[test]
    fn member_removal_shrinks_fanout() {
        let mut b = netcraq(B, NodeRole::Replica, Some(C), 4);
        let n = b.ctx().multicast_members.len();
        let mut members = b.ctx().multicast_members.clone();
        members.pop();
        b.apply_role_update(RoleUpdate {
            epoch: 2,
            role: NodeRole::Replica,
            tail: D,
            successor: Some(C),
            multicast_members: members,
            writes_enabled: true,
        })
        .unwrap();
        assert_eq!(b.ctx().multicast_members.len(), n - 1);
    }

    #[test]
    fn invalid_contexts_rejected() {
        let mut bad = ctx(D, NodeRole::Tail, Some(A));
        assert!(Node::new(bad.clone(), ProtocolKind::Netcraq, StoreConfig::default()).is_err());
        bad.successor = None;
        bad.multicast_members.push(D);
        assert!(Node::new(bad, ProtocolKind::Netcraq, StoreConfig::default()).is_err());
    }

    #[test]
    fn promoted_tail_flushes_pending() {
        let mut c = netcraq(C, NodeRole::Replica, Some(D), 4);
        c.handle(&nf(KvOp::Write, 5, 11), CLIENT);
        c.apply_role_update(RoleUpdate {
            epoch: 2,
            role: NodeRole::Tail,
            tail: C,
            successor: None,
            multicast_members: vec![A, B],
            writes_enabled: true,
        })
        .unwrap();
        let out = c.flush_pending_as_tail();
        assert_eq!(
            out,
            vec![Action::Multicast {
                frame: nf(KvOp::Ack, 5, 11)
            }]
        );
        assert_eq!(c.store().state_of(5).unwrap(), ObjectState::Clean);
    }

    #[test]
    fn deterministic_handling() {
        let mut x = netcraq(B, NodeRole::Replica, Some(C), 4);
        let mut y = x.clone();
        for f in [
            nf(KvOp::Write, 1, 1),
            nf(KvOp::Read, 1, 0),
            nf(KvOp::Ack, 1, 1),
            nf(KvOp::Read, 1, 0),
        ] {
            assert_eq!(x.handle(&f, CLIENT), y.handle(&f, CLIENT));
        }
    }

    fn baseline(me: Addr, role: NodeRole) -> Node {
        let succ = match me {
            A => Some(B),
            B => Some(C),
            C => Some(D),
            _ => None,
        };
        Node::new(
            ctx(me, role, succ),
            ProtocolKind::Baseline,
            StoreConfig::new(16, 2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn baseline_read_routes_through_path_and_back() {
        let path = [A, B, C, D];
        let mut a = baseline(A, NodeRole::Head);
        let req = Frame::Baseline(baseline_request(KvOp::Read, 1, 0, &path));
        let out = a.handle(&req, CLIENT);
        let Action::Send { dest, frame } = &out[0] else {
            panic!("{out:?}")
        };
        assert_eq!(*dest, B);
        let Frame::Baseline(fwd) = frame else { panic!() };
        assert_eq!(fwd.cursor, 1);

        let mut d = baseline(D, NodeRole::Tail);
        let mut at_tail = fwd.clone();
        at_tail.cursor = 3;
        let out = d.handle(&Frame::Baseline(at_tail), CLIENT);
        let Action::Send { dest, frame } = &out[0] else {
            panic!("{out:?}")
        };
        assert_eq!(*dest, C);
        assert_eq!(frame.op(), KvOp::ReadReply);

        let mut back = match frame {
            Frame::Baseline(f) => f.clone(),
            _ => unreachable!(),
        };
        back.cursor = 0;
        let out = a.handle(&Frame::Baseline(back), CLIENT);
        assert!(matches!(out[0], Action::Reply { client: CLIENT, .. }));
    }

    #[test]
    fn baseline_head_sequences_writes() {
        let mut a = baseline(A, NodeRole::Head);
        let req = Frame::Baseline(baseline_request(KvOp::Write, 1, 5, &[A, B, C, D]));
        for expected in 1..=3u16 {
            let out = a.handle(&req, CLIENT);
            let Action::Send {
                frame: Frame::Baseline(f),
                ..
            } = &out[0]
            else {
                panic!()
            };
            assert_eq!(f.seq, expected);
        }
    }

    #[test]
    fn baseline_stale_and_unsequenced_dropped() {
        let mut b = baseline(B, NodeRole::Replica);
        let mut f = baseline_request(KvOp::Write, 1, 5, &[A, B, C, D]);
        f.cursor = 1;
        assert_eq!(
            b.handle(&Frame::Baseline(f.clone()), CLIENT),
            vec![Action::Drop {
                reason: DropReason::Unsequenced
            }]
        );
        f.seq = 10;
        assert!(matches!(
            b.handle(&Frame::Baseline(f.clone()), CLIENT)[0],
            Action::Send { .. }
        ));
        f.seq = 9;
        assert_eq!(
            b.handle(&Frame::Baseline(f), CLIENT),
            vec![Action::Drop {
                reason: DropReason::StaleSequence
            }]
        );
    }

    #[test]
    fn baseline_tail_acks_client() {
        let mut d = baseline(D, NodeRole::Tail);
        let mut f = baseline_request(KvOp::Write, 1, 5, &[A, B, C, D]);
        f.cursor = 3;
        f.seq = 1;
        let out = d.handle(&Frame::Baseline(f), CLIENT);
        assert!(matches!(&out[0], Action::Reply { client: CLIENT, frame } if frame.op() == KvOp::Ack));
        assert_eq!(d.store().read_latest_clean(1).unwrap(), 5);
    }

    #[test]
    fn baseline_cursor_beyond_list_dropped() {
        let mut b = baseline(B, NodeRole::Replica);
        let mut f = baseline_request(KvOp::Read, 1, 0, &[B]);
        f.cursor = 0;
        assert_eq!(
            b.handle(&Frame::Baseline(f), CLIENT),
            vec![Action::Drop {
                reason: DropReason::CursorOutOfRange
            }]
        );
    }

    #[test]
    fn protocol_mismatch_dropped() {
        let mut b = baseline(B, NodeRole::Replica);
        assert_eq!(
            b.handle(&nf(KvOp::Read, 1, 0), CLIENT),
            vec![Action::Drop {
                reason: DropReason::ProtocolMismatch
            }]
        );
    }
}
