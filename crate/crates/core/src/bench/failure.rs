//! Replica failure during a live workload, followed by two-phase recovery.

use serde::{Deserialize, Serialize};

use super::harness::{ChainSpec, Cluster, Driver, RetryPolicy, RunSummary};
use super::workload::{generate, WorkloadSpec};
use super::BenchError;
use crate::controller::{detect_failure, install_all, ControllerError, HeartbeatTable};
use crate::net::{SimTime, TraceKind, TraceRecord, NANOS_PER_MICRO};
use crate::node::Addr;
use crate::verify::{check_per_key, history_from_trace, OpKind, Outcome, Verdict};
use crate::wire::KvOp;

const MILLI: SimTime = 1_000 * NANOS_PER_MICRO;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureScenario {
    pub chain: ChainSpec,
    pub workload: WorkloadSpec,
    /// Chain position of the node to kill.
    pub victim: usize,
    pub kill_at: SimTime,
    pub heartbeat_period: SimTime,
    pub detection_timeout: SimTime,
    /// Pause between phase 1 and the start of phase 2.
    pub recovery_delay: SimTime,
    /// Time writes stay disabled before the snapshot is taken, letting
    /// in-flight messages settle.
    pub drain: SimTime,
    pub retry: RetryPolicy,
}

impl FailureScenario {
    /// A 4-node chain under a 25% write workload losing its second node.
    pub fn standard(chain: ChainSpec) -> Self {
        Self {
            chain,
            workload: WorkloadSpec {
                total_ops: 20_000,
                write_fraction: 0.25,
                rate: 40_000.0,
                ..Default::default()
            },
            victim: 1,
            kill_at: 150 * MILLI,
            heartbeat_period: 10 * MILLI,
            detection_timeout: 30 * MILLI,
            recovery_delay: 50 * MILLI,
            drain: 5 * MILLI,
            retry: RetryPolicy {
                timeout_ns: MILLI,
                max_attempts: 4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub victim: Addr,
    pub detected_at: SimTime,
    pub writes_disabled_at: SimTime,
    pub writes_enabled_at: SimTime,
    pub donor: Addr,
    pub replacement: Addr,
    pub chain_after_phase1: Vec<Addr>,
    pub final_chain: Vec<Addr>,
    /// Reads answered between phase 1 and the start of phase 2.
    pub reads_between_phases: u64,
    /// Write commits on any node while writes were disabled.
    pub commits_while_disabled: u64,
    /// WRITE frames rejected as writes-disabled during the window.
    pub writes_rejected_while_disabled: u64,
    /// Replacement store equals the donor snapshot byte for byte.
    pub snapshot_identical: bool,
    pub summary: RunSummary,
    pub verdict: Verdict,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

pub fn run_failure_scenario(s: &FailureScenario) -> Result<FailureReport, BenchError> {
    let chain_len = s.chain.chain_length;
    if s.victim >= chain_len {
        return Err(BenchError::Workload(format!("victim position {} outside chain", s.victim)));
    }
    let cluster = Cluster::new(&s.chain)?;
    let victim = cluster.controller().config().members()[s.victim];
    let reqs = generate(&s.workload, chain_len, s.chain.store.num_keys)?;
    let mut driver = Driver::new(cluster, reqs, s.workload.rate, Some(s.retry))?;

    let mut table = HeartbeatTable::default();
    for m in driver.cluster().controller().config().members() {
        table.record(m.id, 0);
    }
    if s.heartbeat_period == 0 || s.detection_timeout == 0 {
        return Err(BenchError::Workload("heartbeat period and timeout must be positive".into()));
    }
    let mut killed = false;
    let mut t = 0;
    let detected_at = loop {
        t += s.heartbeat_period;
        if !killed && t >= s.kill_at {
            driver.run_until(s.kill_at)?;
            driver.cluster_mut().sim_mut().kill(victim.addr);
            killed = true;
        }
        driver.run_until(t)?;
        let members = driver.cluster().controller().config().members().to_vec();
        for m in &members {
            if driver.cluster().sim().is_up(m.addr) {
                table.record(m.id, t);
            }
        }
        let failed = detect_failure(&table, t, s.detection_timeout);
        if failed.contains(&victim.id) {
            break t;
        }
        if let Some(&other) = failed.first() {
            return Err(BenchError::Workload(format!("node {other} failed unexpectedly")));
        }
    };
    table.forget(victim.id);

    let promoted = driver.cluster_mut().with_controller(|c, nodes| {
        let r = c.phase1_redirect(victim.id, detected_at)?;
        install_all(nodes, r.updates)?;
        Ok::<_, ControllerError>(r.promoted_tail)
    })?;
    if let Some(tail) = promoted {
        let sim = driver.cluster_mut().sim_mut();
        let actions = sim.node_mut(tail).map(|n| n.flush_pending_as_tail()).unwrap_or_default();
        sim.emit(tail, actions, tail, 0);
    }
    let chain_after_phase1 = driver.cluster().chain();

    driver.run_until(detected_at + s.recovery_delay)?;
    let writes_disabled_at = driver.now();
    let plan = driver.cluster_mut().with_controller(|c, nodes| {
        let plan = c.begin_recovery(victim.id)?;
        install_all(nodes, plan.updates.clone())?;
        Ok::<_, ControllerError>(plan)
    })?;
    let commits_before = driver.cluster().totals().write_commits;

    driver.run_until(writes_disabled_at + s.drain)?;
    let replacement = driver.cluster_mut().next_member();
    let (snapshot, commits_during) = {
        let commits = driver.cluster().totals().write_commits - commits_before;
        let snap = driver.cluster_mut().with_controller(|_, nodes| nodes.snapshot(plan.donor));
        (snap, commits)
    };
    let Some(snapshot) = snapshot else {
        driver.cluster_mut().with_controller(|c, nodes| {
            let updates = c.abort_recovery(victim.id)?;
            install_all(nodes, updates)
        })?;
        return Err(ControllerError::DonorUnreachable(plan.donor).into());
    };
    driver.cluster_mut().with_controller(|c, nodes| {
        let (ctx, updates) = c.complete_recovery(victim.id, replacement)?;
        nodes
            .provision(ctx, &snapshot)
            .map_err(|reason| ControllerError::Install {
                addr: replacement.addr,
                reason,
            })?;
        install_all(nodes, updates)
    })?;
    let writes_enabled_at = driver.now();
    let snapshot_identical = driver
        .cluster()
        .sim()
        .node(replacement.addr)
        .is_some_and(|n| n.store().snapshot() == snapshot);

    driver.run_to_end(SimTime::MAX)?;
    let summary = driver.summary();
    let trace = driver.take_trace();
    let history = history_from_trace(&trace);
    let verdict = check_per_key(&history)?;

    let reads_between_phases = history
        .iter()
        .filter(|e| {
            e.kind == OpKind::Read
                && matches!(e.outcome, Outcome::Returned(_))
                && e.invoke >= detected_at
                && e.invoke < writes_disabled_at
        })
        .count() as u64;
    let writes_rejected_while_disabled = trace
        .iter()
        .filter(|r| {
            r.kind == TraceKind::Reject
                && r.op == KvOp::Write
                && r.reason.as_deref() == Some("writes_disabled")
                && (writes_disabled_at..=writes_enabled_at).contains(&r.time)
        })
        .count() as u64;

    Ok(FailureReport {
        victim: victim.addr,
        detected_at,
        writes_disabled_at,
        writes_enabled_at,
        donor: plan.donor,
        replacement: replacement.addr,
        chain_after_phase1,
        final_chain: driver.cluster().chain(),
        reads_between_phases,
        commits_while_disabled: commits_during,
        writes_rejected_while_disabled,
        snapshot_identical,
        summary,
        verdict,
        trace,
    })
}
