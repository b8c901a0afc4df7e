//! Control plane: builds chains, installs node metadata, detects failed
//! nodes and runs the two-phase recovery.
//!
//! Phase 1 splices a failed node out of the chain so traffic keeps flowing.
//! Phase 2 disables writes chain-wide, copies a donor's store onto a
//! replacement, re-inserts the replacement at the failed position and
//! re-enables writes. Every installation bumps the configuration epoch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::node::{Addr, NodeContext, NodeRole, RoleUpdate};
use crate::net::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("invalid chain configuration: {0}")]
    Config(String),

    #[error("node {0} is not part of the chain")]
    UnknownNode(u32),

    #[error("chain cannot shrink below 2 nodes")]
    Unrecoverable,

    #[error("no recovery pending for node {0}")]
    NoRecovery(u32),

    #[error("donor {0} unreachable, recovery aborted")]
    DonorUnreachable(Addr),

    #[error("installation on {addr} failed: {reason}")]
    Install { addr: Addr, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Member {
    pub id: u32,
    pub addr: Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    members: Vec<Member>,
    epoch: u64,
    writes_enabled: bool,
}

impl ChainConfig {
    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn writes_enabled(&self) -> bool {
        self.writes_enabled
    }

    pub fn head(&self) -> Member {
        self.members[0]
    }

    pub fn tail(&self) -> Member {
        *self.members.last().expect("chain is never empty")
    }

    pub fn addrs(&self) -> Vec<Addr> {
        self.members.iter().map(|m| m.addr).collect()
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.members.iter().position(|m| m.id == id)
    }

    pub fn role_at(&self, pos: usize) -> NodeRole {
        if pos == 0 {
            NodeRole::Head
        } else if pos + 1 == self.members.len() {
            NodeRole::Tail
        } else {
            NodeRole::Replica
        }
    }

    /// The metadata every member must run with under this configuration.
    pub fn contexts(&self) -> Vec<NodeContext> {
        let tail = self.tail().addr;
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| NodeContext {
                my_id: m.addr,
                role: self.role_at(i),
                tail,
                successor: self.members.get(i + 1).map(|s| s.addr),
                multicast_members: self
                    .members
                    .iter()
                    .filter(|o| o.addr != m.addr)
                    .map(|o| o.addr)
                    .collect(),
                epoch: self.epoch,
                writes_enabled: self.writes_enabled,
            })
            .collect()
    }

    pub fn updates(&self) -> Vec<(Addr, RoleUpdate)> {
        self.contexts()
            .into_iter()
            .map(|c| {
                (
                    c.my_id,
                    RoleUpdate {
                        epoch: c.epoch,
                        role: c.role,
                        tail: c.tail,
                        successor: c.successor,
                        multicast_members: c.multicast_members,
                        writes_enabled: c.writes_enabled,
                    },
                )
            })
            .collect()
    }

    /// Exactly one head and one tail, and successor pointers walk the list
    /// from head to tail.
    pub fn check_well_formed(&self) -> Result<(), String> {
        let ctxs = self.contexts();
        let heads = ctxs.iter().filter(|c| c.role == NodeRole::Head).count();
        let tails = ctxs.iter().filter(|c| c.role == NodeRole::Tail).count();
        if heads != 1 || tails != 1 {
            return Err(format!("{heads} heads, {tails} tails"));
        }
        let by_addr: BTreeMap<Addr, &NodeContext> = ctxs.iter().map(|c| (c.my_id, c)).collect();
        let mut seen = BTreeSet::new();
        let mut cur = ctxs[0].my_id;
        loop {
            if !seen.insert(cur) {
                return Err(format!("successor cycle at {cur}"));
            }
            match by_addr[&cur].successor {
                Some(next) => cur = next,
                None => break,
            }
        }
        if seen.len() != ctxs.len() || cur != self.tail().addr {
            return Err("successor walk does not cover the chain".into());
        }
        Ok(())
    }
}

/// Assigns roles by position: first is head, last is tail.
pub fn build_chain(members: Vec<Member>) -> Result<ChainConfig, ControllerError> {
    if members.len() < 2 {
        return Err(ControllerError::Config(format!(
            "a chain needs at least 2 nodes, got {}",
            members.len()
        )));
    }
    let mut ids = BTreeSet::new();
    let mut addrs = BTreeSet::new();
    for m in &members {
        if !ids.insert(m.id) {
            return Err(ControllerError::Config(format!("duplicate node id {}", m.id)));
        }
        if !addrs.insert(m.addr) {
            return Err(ControllerError::Config(format!(
                "duplicate address {}",
                m.addr
            )));
        }
    }
    Ok(ChainConfig {
        members,
        epoch: 1,
        writes_enabled: true,
    })
}

/// Last time each node answered a heartbeat.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatTable {
    last_seen: BTreeMap<u32, SimTime>,
}

impl HeartbeatTable {
    pub fn record(&mut self, id: u32, at: SimTime) {
        let e = self.last_seen.entry(id).or_insert(at);
        *e = (*e).max(at);
    }

    pub fn forget(&mut self, id: u32) {
        self.last_seen.remove(&id);
    }

    pub fn last_seen(&self, id: u32) -> Option<SimTime> {
        self.last_seen.get(&id).copied()
    }
}

/// Nodes whose last heartbeat is at least `timeout` old.
pub fn detect_failure(heartbeats: &HeartbeatTable, now: SimTime, timeout: SimTime) -> Vec<u32> {
    assert!(timeout > 0, "detection timeout must be positive");
    heartbeats
        .last_seen
        .iter()
        .filter(|(_, seen)| now.saturating_sub(**seen) >= timeout)
        .map(|(id, _)| *id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePhase {
    Redirected,
    Recovering,
    Recovered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: u32,
    pub addr: Addr,
    pub detected_at: SimTime,
    pub phase: FailurePhase,
    /// Index the node held before it was spliced out.
    pub position: usize,
}

/// Result of splicing a failed node out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redirect {
    pub updates: Vec<(Addr, RoleUpdate)>,
    /// Set when the tail failed: this node must commit and acknowledge its
    /// pending versions.
    pub promoted_tail: Option<Addr>,
}

/// What phase 2 needs from the environment hosting the nodes.
pub trait NodeAccess {
    fn apply(&mut self, addr: Addr, update: RoleUpdate) -> Result<(), String>;
    /// Store snapshot of a reachable node, `None` if it cannot be reached.
    fn snapshot(&self, addr: Addr) -> Option<Vec<u8>>;
    /// Brings up a new node with the given metadata and store contents.
    fn provision(&mut self, ctx: NodeContext, snapshot: &[u8]) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub donor: Addr,
    pub position: usize,
    /// Writes-disabled installation for every current member.
    pub updates: Vec<(Addr, RoleUpdate)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Controller {
    config: ChainConfig,
    failures: Vec<FailureRecord>,
}

impl Controller {
    pub fn new(config: ChainConfig) -> Self {
        Self {
            config,
            failures: Vec::new(),
        }
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn failures(&self) -> &[FailureRecord] {
        &self.failures
    }

    pub fn failure(&self, id: u32) -> Option<&FailureRecord> {
        self.failures.iter().rev().find(|f| f.id == id)
    }

    /// Phase 1: remove `failed_id` from forwarding and the multicast group.
    pub fn phase1_redirect(
        &mut self,
        failed_id: u32,
        detected_at: SimTime,
    ) -> Result<Redirect, ControllerError> {
        let pos = self
            .config
            .position(failed_id)
            .ok_or(ControllerError::UnknownNode(failed_id))?;
        if self.config.len() <= 2 {
            return Err(ControllerError::Unrecoverable);
        }
        let was_tail = pos + 1 == self.config.len();
        let removed = self.config.members.remove(pos);
        self.config.epoch += 1;
        self.failures.push(FailureRecord {
            id: failed_id,
            addr: removed.addr,
            detected_at,
            phase: FailurePhase::Redirected,
            position: pos,
        });
        Ok(Redirect {
            updates: self.config.updates(),
            promoted_tail: was_tail.then(|| self.config.tail().addr),
        })
    }

    /// Phase 2, first half: pick the donor and disable writes everywhere.
    pub fn begin_recovery(&mut self, failed_id: u32) -> Result<RecoveryPlan, ControllerError> {
        let idx = self.pending_failure(failed_id)?;
        let position = self.failures[idx].position.min(self.config.len());
        let donor = if position == 0 {
            self.config.members[0].addr
        } else {
            self.config.members[position - 1].addr
        };
        self.failures[idx].phase = FailurePhase::Recovering;
        self.config.writes_enabled = false;
        self.config.epoch += 1;
        Ok(RecoveryPlan {
            donor,
            position,
            updates: self.config.updates(),
        })
    }

    /// Phase 2, second half: insert the replacement at the failed position
    /// and re-enable writes. Returns the replacement's context followed by
    /// the updates for everyone else.
    pub fn complete_recovery(
        &mut self,
        failed_id: u32,
        replacement: Member,
    ) -> Result<(NodeContext, Vec<(Addr, RoleUpdate)>), ControllerError> {
        let idx = self
            .failures
            .iter()
            .rposition(|f| f.id == failed_id && f.phase == FailurePhase::Recovering)
            .ok_or(ControllerError::NoRecovery(failed_id))?;
        if self.config.position(replacement.id).is_some()
            || self.config.addrs().contains(&replacement.addr)
        {
            return Err(ControllerError::Config(format!(
                "replacement {} already in the chain",
                replacement.id
            )));
        }
        let position = self.failures[idx].position.min(self.config.len());
        self.config.members.insert(position, replacement);
        self.config.writes_enabled = true;
        self.config.epoch += 1;
        self.failures[idx].phase = FailurePhase::Recovered;
        let mut updates = self.config.updates();
        let ctx = self.config.contexts().swap_remove(position);
        updates.remove(position);
        Ok((ctx, updates))
    }

    /// Gives up on a recovery: the phase 1 chain stays and writes come back.
    /// The record stays in `Recovering` so a later attempt can retry.
    pub fn abort_recovery(&mut self, failed_id: u32) -> Result<Vec<(Addr, RoleUpdate)>, ControllerError> {
        if !self
            .failures
            .iter()
            .any(|f| f.id == failed_id && f.phase == FailurePhase::Recovering)
        {
            return Err(ControllerError::NoRecovery(failed_id));
        }
        self.config.writes_enabled = true;
        self.config.epoch += 1;
        Ok(self.config.updates())
    }

    /// Runs all of phase 2 against `nodes` without pausing between steps.
    pub fn phase2_recover(
        &mut self,
        failed_id: u32,
        replacement: Member,
        nodes: &mut dyn NodeAccess,
    ) -> Result<(), ControllerError> {
        let plan = self.begin_recovery(failed_id)?;
        install_all(nodes, plan.updates)?;
        let Some(snapshot) = nodes.snapshot(plan.donor) else {
            let updates = self.abort_recovery(failed_id)?;
            install_all(nodes, updates)?;
            return Err(ControllerError::DonorUnreachable(plan.donor));
        };
        let (ctx, updates) = self.complete_recovery(failed_id, replacement)?;
        nodes
            .provision(ctx, &snapshot)
            .map_err(|reason| ControllerError::Install {
                addr: replacement.addr,
                reason,
            })?;
        install_all(nodes, updates)
    }

    fn pending_failure(&self, failed_id: u32) -> Result<usize, ControllerError> {
        self.failures
            .iter()
            .rposition(|f| f.id == failed_id && f.phase != FailurePhase::Recovered)
            .ok_or(ControllerError::NoRecovery(failed_id))
    }
}

pub fn install_all(
    nodes: &mut dyn NodeAccess,
    updates: Vec<(Addr, RoleUpdate)>,
) -> Result<(), ControllerError> {
    for (addr, update) in updates {
        nodes
            .apply(addr, update)
            .map_err(|reason| ControllerError::Install { addr, reason })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::Node;
    use crate::store::{ObjectStore, StoreConfig};
    use crate::wire::{Frame, KvOp, NetcraqFrame, ProtocolKind};

    fn members(n: u32) -> Vec<Member> {
        (0..n).map(|i| Member { id: i, addr: Addr(10 + i) }).collect()
    }

    #[test]
    fn positional_roles() {
        let cfg = build_chain(members(4)).unwrap();
        let roles: Vec<_> = cfg.contexts().iter().map(|c| c.role).collect();
        assert_eq!(
            roles,
            vec![NodeRole::Head, NodeRole::Replica, NodeRole::Replica, NodeRole::Tail]
        );
        let cfg2 = build_chain(members(2)).unwrap();
        let roles: Vec<_> = cfg2.contexts().iter().map(|c| c.role).collect();
        assert_eq!(roles, vec![NodeRole::Head, NodeRole::Tail]);
        let ctx = &cfg.contexts()[1];
        assert_eq!(ctx.successor, Some(Addr(12)));
        assert_eq!(ctx.tail, Addr(13));
        assert_eq!(ctx.multicast_members, vec![Addr(10), Addr(12), Addr(13)]);
        cfg.check_well_formed().unwrap();
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(build_chain(members(1)).is_err());
        let mut m = members(3);
        m[2].id = 0;
        assert!(matches!(build_chain(m), Err(ControllerError::Config(_))));
        let mut m = members(3);
        m[2].addr = Addr(10);
        assert!(build_chain(m).is_err());
    }

    #[test]
    fn f_plus_one_nodes_survive_f_failures() {
        let f = 3;
        let mut ctl = Controller::new(build_chain(members(f + 2)).unwrap());
        for id in 0..f {
            ctl.phase1_redirect(id, 0).unwrap();
            ctl.config().check_well_formed().unwrap();
        }
        assert_eq!(ctl.config().len(), 2);
        assert_eq!(ctl.phase1_redirect(f, 0), Err(ControllerError::Unrecoverable));
    }

    #[test]
    fn detection_by_timeout() {
        let mut hb = HeartbeatTable::default();
        let period = 100;
        for id in 0..3 {
            hb.record(id, 0);
        }
        for t in 1..=3 {
            hb.record(0, t * period);
            hb.record(2, t * period);
        }
        assert!(detect_failure(&hb, 3 * period, 5 * period).is_empty());
        assert_eq!(detect_failure(&hb, 3 * period, 2 * period), vec![1]);
    }

    #[test]
    fn replica_splice() {
        let mut ctl = Controller::new(build_chain(members(4)).unwrap());
        let epoch = ctl.config().epoch();
        let r = ctl.phase1_redirect(1, 5).unwrap();
        assert_eq!(ctl.config().addrs(), vec![Addr(10), Addr(12), Addr(13)]);
        assert_eq!(r.updates[0].1.successor, Some(Addr(12)));
        assert_eq!(r.promoted_tail, None);
        assert!(ctl.config().epoch() > epoch);
        assert!(r.updates.iter().all(|(_, u)| !u.multicast_members.contains(&Addr(11))));
        assert_eq!(ctl.failure(1).unwrap().phase, FailurePhase::Redirected);
    }

    #[test]
    fn tail_and_head_failures() {
        let mut ctl = Controller::new(build_chain(members(4)).unwrap());
        let r = ctl.phase1_redirect(3, 0).unwrap();
        assert_eq!(r.promoted_tail, Some(Addr(12)));
        assert_eq!(ctl.config().tail().addr, Addr(12));
        let r = ctl.phase1_redirect(0, 0).unwrap();
        assert_eq!(ctl.config().head().addr, Addr(11));
        assert_eq!(r.updates[0].1.role, NodeRole::Head);
        ctl.config().check_well_formed().unwrap();
    }

    struct Nodes(BTreeMap<Addr, Node>, BTreeSet<Addr>);

    impl NodeAccess for Nodes {
        fn apply(&mut self, addr: Addr, update: RoleUpdate) -> Result<(), String> {
            self.0
                .get_mut(&addr)
                .ok_or("missing")?
                .apply_role_update(update)
                .map_err(|e| e.to_string())
        }

        fn snapshot(&self, addr: Addr) -> Option<Vec<u8>> {
            if self.1.contains(&addr) {
                return None;
            }
            self.0.get(&addr).map(|n| n.store().snapshot())
        }

        fn provision(&mut self, ctx: NodeContext, snapshot: &[u8]) -> Result<(), String> {
            let store = ObjectStore::from_snapshot(snapshot).map_err(|e| e.to_string())?;
            let mut node = Node::new(ctx, ProtocolKind::Netcraq, store.config()).map_err(|e| e.to_string())?;
            node.install_store(store).map_err(|e| e.to_string())?;
            self.0.insert(node.addr(), node);
            Ok(())
        }
    }

    fn live_nodes(cfg: &ChainConfig) -> Nodes {
        Nodes(
            cfg.contexts()
                .into_iter()
                .map(|c| {
                    (
                        c.my_id,
                        Node::new(c, ProtocolKind::Netcraq, StoreConfig::new(8, 4).unwrap()).unwrap(),
                    )
                })
                .collect(),
            BTreeSet::new(),
        )
    }

    #[test]
    fn phase2_copies_donor_and_reinserts() {
        let cfg = build_chain(members(4)).unwrap();
        let mut nodes = live_nodes(&cfg);
        for n in nodes.0.values_mut() {
            n.handle(&Frame::Netcraq(NetcraqFrame::new(KvOp::Ack, 3, 77)), Addr(99));
        }
        let mut ctl = Controller::new(cfg);
        let r = ctl.phase1_redirect(1, 0).unwrap();
        nodes.0.remove(&Addr(11));
        install_all(&mut nodes, r.updates).unwrap();

        let replacement = Member { id: 9, addr: Addr(19) };
        ctl.phase2_recover(1, replacement, &mut nodes).unwrap();
        assert_eq!(ctl.config().addrs(), vec![Addr(10), Addr(19), Addr(12), Addr(13)]);
        assert_eq!(
            nodes.0[&Addr(19)].store().snapshot(),
            nodes.0[&Addr(10)].store().snapshot()
        );
        assert_eq!(nodes.0[&Addr(10)].ctx().successor, Some(Addr(19)));
        assert!(nodes.0.values().all(|n| n.ctx().writes_enabled));
        assert!(nodes.0.values().all(|n| n.ctx().epoch == ctl.config().epoch()));
        assert_eq!(ctl.failure(1).unwrap().phase, FailurePhase::Recovered);
        ctl.config().check_well_formed().unwrap();
    }

    #[test]
    fn head_replacement_uses_successor_as_donor() {
        let mut ctl = Controller::new(build_chain(members(4)).unwrap());
        ctl.phase1_redirect(0, 0).unwrap();
        let plan = ctl.begin_recovery(0).unwrap();
        assert_eq!(plan.donor, Addr(11));
        assert_eq!(plan.position, 0);
        assert!(plan.updates.iter().all(|(_, u)| !u.writes_enabled));
        let (ctx, _) = ctl.complete_recovery(0, Member { id: 7, addr: Addr(17) }).unwrap();
        assert_eq!(ctx.role, NodeRole::Head);
        assert_eq!(ctx.successor, Some(Addr(11)));
    }

    #[test]
    fn unreachable_donor_aborts() {
        let cfg = build_chain(members(4)).unwrap();
        let mut nodes = live_nodes(&cfg);
        let mut ctl = Controller::new(cfg);
        let r = ctl.phase1_redirect(2, 0).unwrap();
        nodes.0.remove(&Addr(12));
        install_all(&mut nodes, r.updates).unwrap();
        let before = ctl.config().addrs();
        nodes.1.insert(Addr(11));
        let res = ctl.phase2_recover(2, Member { id: 8, addr: Addr(18) }, &mut nodes);
        assert_eq!(res, Err(ControllerError::DonorUnreachable(Addr(11))));
        assert_eq!(ctl.config().addrs(), before);
        assert!(ctl.config().writes_enabled());
        assert_eq!(ctl.failure(2).unwrap().phase, FailurePhase::Recovering);

        nodes.1.clear();
        ctl.phase2_recover(2, Member { id: 8, addr: Addr(18) }, &mut nodes)
            .unwrap();
        assert_eq!(ctl.failure(2).unwrap().phase, FailurePhase::Recovered);
    }

    #[test]
    fn phase2_requires_phase1() {
        let mut ctl = Controller::new(build_chain(members(4)).unwrap());
        assert_eq!(ctl.begin_recovery(1), Err(ControllerError::NoRecovery(1)));
    }
}
