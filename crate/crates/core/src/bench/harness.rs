use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::metrics::{percentile, MetricsRow};
use super::workload::Request;
use super::BenchError;
use crate::controller::{build_chain, install_all, Controller, Member, NodeAccess};
use crate::net::{
    LinkModel, ProcessingModel, SimOutput, SimTime, Simulator, TraceRecord, NANOS_PER_MICRO,
    NANOS_PER_SEC,
};
use crate::node::{baseline_request, Addr, Node, NodeContext, RoleUpdate};
use crate::store::{ObjectStore, StoreConfig};
use crate::verify::{tagged_value, OpKind};
use crate::wire::{Frame, KvOp, NetcraqFrame, ProtocolKind};

/// Client endpoints are numbered from here; chain nodes from 1.
pub const CLIENT_BASE: u32 = 1_000_000;

const TIMEOUT_FLAG: u64 = 1 << 63;

/// Everything needed to stand up a simulated chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub protocol: ProtocolKind,
    pub chain_length: usize,
    pub store: StoreConfig,
    pub link: LinkModel,
    pub processing: ProcessingModel,
    pub seed: u64,
}

impl ChainSpec {
    pub fn new(protocol: ProtocolKind, chain_length: usize) -> Self {
        Self {
            protocol,
            chain_length,
            store: StoreConfig::default(),
            link: LinkModel::default(),
            processing: ProcessingModel::default(),
            seed: 1,
        }
    }
}

/// Sums of per-node counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeTotals {
    pub dirty_commits: u64,
    pub write_commits: u64,
    pub acks_applied: u64,
    pub drops: u64,
}

/// A simulated chain plus its controller.
pub struct Cluster {
    sim: Simulator,
    controller: Controller,
    protocol: ProtocolKind,
    store: StoreConfig,
    next_id: u32,
}

impl Cluster {
    pub fn new(spec: &ChainSpec) -> Result<Self, BenchError> {
        let members: Vec<Member> = (0..spec.chain_length as u32)
            .map(|i| Member {
                id: i,
                addr: Addr(i + 1),
            })
            .collect();
        let config = build_chain(members)?;
        let mut sim = Simulator::new(spec.link, spec.processing, spec.seed);
        for ctx in config.contexts() {
            sim.add_node(Node::new(ctx, spec.protocol, spec.store)?)?;
        }
        Ok(Self {
            sim,
            controller: Controller::new(config),
            protocol: spec.protocol,
            store: spec.store,
            next_id: spec.chain_length as u32,
        })
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn protocol(&self) -> ProtocolKind {
        self.protocol
    }

    /// Current chain, head first.
    pub fn chain(&self) -> Vec<Addr> {
        self.controller.config().addrs()
    }

    /// A fresh member id and address for a replacement node.
    pub fn next_member(&mut self) -> Member {
        let id = self.next_id;
        self.next_id += 1;
        Member { id, addr: Addr(id + 1) }
    }

    /// Frame a client sends to the node at `entry` in the current chain.
    pub fn request_frame(&self, op: KvOp, key: u32, value: u128, entry: usize) -> Frame {
        match self.protocol {
            ProtocolKind::Netcraq => Frame::Netcraq(NetcraqFrame::new(op, key, value)),
            ProtocolKind::Baseline => {
                let chain = self.chain();
                let entry = entry.min(chain.len() - 1);
                Frame::Baseline(baseline_request(op, key, value, &chain[entry..]))
            }
        }
    }

    pub fn totals(&self) -> NodeTotals {
        let mut t = NodeTotals::default();
        for n in self.sim.nodes() {
            let m = n.metrics();
            t.dirty_commits += m.dirty_commits;
            t.write_commits += m.write_commits();
            t.acks_applied += m.acks_applied;
            t.drops += m.total_drops();
        }
        t
    }

    /// Runs `f` with the controller and a view of the simulated nodes.
    pub fn with_controller<T>(
        &mut self,
        f: impl FnOnce(&mut Controller, &mut dyn NodeAccess) -> T,
    ) -> T {
        let mut access = SimNodes {
            sim: &mut self.sim,
            protocol: self.protocol,
            store: self.store,
        };
        f(&mut self.controller, &mut access)
    }

    pub fn install(&mut self, updates: Vec<(Addr, RoleUpdate)>) -> Result<(), BenchError> {
        self.with_controller(|_, nodes| install_all(nodes, updates))?;
        Ok(())
    }
}

struct SimNodes<'a> {
    sim: &'a mut Simulator,
    protocol: ProtocolKind,
    store: StoreConfig,
}

impl NodeAccess for SimNodes<'_> {
    fn apply(&mut self, addr: Addr, update: RoleUpdate) -> Result<(), String> {
        let node = self.sim.node_mut(addr).ok_or_else(|| format!("no node {addr}"))?;
        node.apply_role_update(update).map_err(|e| e.to_string())
    }

    fn snapshot(&self, addr: Addr) -> Option<Vec<u8>> {
        if !self.sim.is_up(addr) {
            return None;
        }
        self.sim.node(addr).map(|n| n.store().snapshot())
    }

    fn provision(&mut self, ctx: NodeContext, snapshot: &[u8]) -> Result<(), String> {
        let mut node = Node::new(ctx, self.protocol, self.store).map_err(|e| e.to_string())?;
        let store = ObjectStore::from_snapshot(snapshot).map_err(|e| e.to_string())?;
        node.install_store(store).map_err(|e| e.to_string())?;
        self.sim.add_node(node).map_err(|e| e.to_string())
    }
}

/// Client behaviour when no answer arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub timeout_ns: SimTime,
    /// Total attempts per operation, including the first.
    pub max_attempts: u32,
}

#[derive(Debug, Clone)]
struct OpState {
    req: Request,
    first_invoke: Option<SimTime>,
    complete: Option<SimTime>,
    dropped: bool,
    attempts: u32,
    tag: u64,
    target: Option<Addr>,
}

/// Issues requests against a [`Cluster`] and tracks their completion.
pub struct Driver {
    cluster: Cluster,
    ops: Vec<OpState>,
    by_tag: HashMap<u64, usize>,
    next_tag: u64,
    retry: Option<RetryPolicy>,
    offered_rate: f64,
}

impl Driver {
    pub fn new(
        mut cluster: Cluster,
        requests: Vec<Request>,
        offered_rate: f64,
        retry: Option<RetryPolicy>,
    ) -> Result<Self, BenchError> {
        let clients: BTreeSet<u32> = requests.iter().map(|r| r.client).collect();
        for c in clients {
            cluster.sim.add_client(Addr(CLIENT_BASE + c))?;
        }
        cluster.sim.set_report_drops(true);
        let now = cluster.sim.now();
        for (i, r) in requests.iter().enumerate() {
            cluster.sim.set_timer(now + r.at, i as u64)?;
        }
        let ops = requests
            .into_iter()
            .map(|req| OpState {
                req,
                first_invoke: None,
                complete: None,
                dropped: false,
                attempts: 0,
                tag: 0,
                target: None,
            })
            .collect();
        Ok(Self {
            cluster,
            ops,
            by_tag: HashMap::new(),
            next_tag: 1,
            retry,
            offered_rate,
        })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn into_cluster(self) -> Cluster {
        self.cluster
    }

    pub fn now(&self) -> SimTime {
        self.cluster.sim.now()
    }

    /// Processes every event up to `t` and moves the clock there.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), BenchError> {
        while let Some(out) = self.cluster.sim.step(t)? {
            self.handle(out)?;
        }
        self.cluster.sim.run_until(t)?;
        Ok(())
    }

    /// Runs until nothing is left to do or `max_time` passes.
    pub fn run_to_end(&mut self, max_time: SimTime) -> Result<(), BenchError> {
        while let Some(out) = self.cluster.sim.step(max_time)? {
            self.handle(out)?;
        }
        Ok(())
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.cluster.sim.take_trace()
    }

    fn handle(&mut self, out: SimOutput) -> Result<(), BenchError> {
        match out {
            SimOutput::Timer { token, .. } if token & TIMEOUT_FLAG != 0 => {
                let tag = token & !TIMEOUT_FLAG;
                let Some(&idx) = self.by_tag.get(&tag) else {
                    return Ok(());
                };
                let op = &self.ops[idx];
                let retry = self.retry.expect("timeouts are only set with a retry policy");
                if op.complete.is_none() && op.tag == tag && op.attempts < retry.max_attempts {
                    self.issue(idx)?;
                }
            }
            SimOutput::Timer { token, .. } => self.issue(token as usize)?,
            SimOutput::Client(d) => {
                if let Some(&idx) = self.by_tag.get(&d.tag) {
                    let op = &mut self.ops[idx];
                    if op.complete.is_none() {
                        op.complete = Some(d.at);
                    }
                }
            }
            SimOutput::Dropped { tag, op, .. } => {
                if !matches!(op, KvOp::Read | KvOp::Write) || self.retry.is_some() {
                    return Ok(());
                }
                if let Some(&idx) = self.by_tag.get(&tag) {
                    let op = &mut self.ops[idx];
                    if op.complete.is_none() {
                        op.dropped = true;
                    }
                }
            }
        }
        Ok(())
    }

    fn issue(&mut self, idx: usize) -> Result<(), BenchError> {
        let chain = self.cluster.chain();
        let now = self.cluster.sim.now();
        let op = &self.ops[idx];
        let pos = match op.req.kind {
            OpKind::Write => 0,
            OpKind::Read => match op.target.and_then(|t| chain.iter().position(|&a| a == t)) {
                Some(p) if op.attempts > 0 => (p + 1) % chain.len(),
                _ => op.req.position.min(chain.len() - 1),
            },
        };
        let tag = self.next_tag;
        self.next_tag += 1;
        let client = Addr(CLIENT_BASE + op.req.client);
        let (kind, value) = match op.req.kind {
            OpKind::Read => (KvOp::Read, 0),
            OpKind::Write => (KvOp::Write, tagged_value(tag, op.req.client as u64)),
        };
        let frame = self.cluster.request_frame(kind, op.req.key, value, pos);
        let op = &mut self.ops[idx];
        op.first_invoke.get_or_insert(now);
        op.attempts += 1;
        op.tag = tag;
        op.target = Some(chain[pos]);
        self.by_tag.insert(tag, idx);
        self.cluster.sim.send(client, chain[pos], &frame, client, tag)?;
        if let Some(r) = self.retry {
            self.cluster.sim.set_timer(now + r.timeout_ns, TIMEOUT_FLAG | tag)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        let mut latencies = Vec::new();
        let mut by_pos: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
        let (mut reads, mut writes, mut dropped, mut injected) = (0u64, 0u64, 0u64, 0u64);
        let mut first = SimTime::MAX;
        let mut last = 0;
        for op in &self.ops {
            let Some(start) = op.first_invoke else {
                continue;
            };
            injected += 1;
            first = first.min(start);
            if let Some(done) = op.complete {
                let lat = done - start;
                latencies.push(lat);
                last = last.max(done);
                match op.req.kind {
                    OpKind::Read => {
                        reads += 1;
                        let e = by_pos.entry(op.req.position).or_default();
                        e.0 += lat;
                        e.1 += 1;
                    }
                    OpKind::Write => writes += 1,
                }
            } else if op.dropped {
                dropped += 1;
            }
        }
        latencies.sort_unstable();
        let completed = reads + writes;
        let offered_span = injected as f64 / self.offered_rate * NANOS_PER_SEC as f64;
        let span_s = offered_span.max(last.saturating_sub(first) as f64) / NANOS_PER_SEC as f64;
        let per_sec = |n: u64| if span_s > 0.0 { n as f64 / span_s } else { 0.0 };
        let messages = self.cluster.sim.stats().sent;
        let totals = self.cluster.totals();
        RunSummary {
            offered_rate: self.offered_rate,
            injected,
            completed,
            completed_reads: reads,
            completed_writes: writes,
            dropped,
            in_flight: injected - completed - dropped,
            completed_qps: per_sec(completed),
            read_qps: per_sec(reads),
            mean_latency_ns: if latencies.is_empty() {
                0.0
            } else {
                latencies.iter().sum::<u64>() as f64 / latencies.len() as f64
            },
            p95_latency_ns: percentile(&latencies, 95.0),
            p99_latency_ns: percentile(&latencies, 99.0),
            messages,
            msgs_per_query: if completed == 0 {
                0.0
            } else {
                messages as f64 / completed as f64
            },
            dirty_commits: totals.dirty_commits,
            node_drops: totals.drops,
            read_latency_by_position: by_pos
                .into_iter()
                .map(|(p, (sum, n))| (p, sum as f64 / n as f64))
                .collect(),
        }
    }
}

/// Aggregate results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub offered_rate: f64,
    pub injected: u64,
    pub completed: u64,
    pub completed_reads: u64,
    pub completed_writes: u64,
    pub dropped: u64,
    /// Neither completed nor dropped when the run stopped.
    pub in_flight: u64,
    pub completed_qps: f64,
    pub read_qps: f64,
    pub mean_latency_ns: f64,
    pub p95_latency_ns: u64,
    pub p99_latency_ns: u64,
    /// Every message put on the wire, client requests included.
    pub messages: u64,
    pub msgs_per_query: f64,
    pub dirty_commits: u64,
    pub node_drops: u64,
    /// Mean read latency per injection position.
    pub read_latency_by_position: BTreeMap<usize, f64>,
}

impl RunSummary {
    pub fn to_row(
        &self,
        experiment: &str,
        protocol: ProtocolKind,
        chain_length: usize,
        distance_from_tail: Option<usize>,
    ) -> MetricsRow {
        let us = |ns: f64| ns / NANOS_PER_MICRO as f64;
        MetricsRow {
            experiment: experiment.to_string(),
            protocol,
            chain_length,
            distance_from_tail,
            offered_rate: self.offered_rate,
            completed_qps: self.completed_qps,
            mean_latency_us: us(self.mean_latency_ns),
            p95_latency_us: us(self.p95_latency_ns as f64),
            p99_latency_us: us(self.p99_latency_ns as f64),
            msgs_per_query: self.msgs_per_query,
            dirty_commits: self.dirty_commits,
            drops: self.dropped,
        }
    }
}

/// Runs `requests` to completion on a fresh chain.
pub fn run_requests(
    spec: &ChainSpec,
    requests: Vec<Request>,
    offered_rate: f64,
    record_trace: bool,
) -> Result<(RunSummary, Vec<TraceRecord>), BenchError> {
    let mut cluster = Cluster::new(spec)?;
    cluster.sim_mut().set_record_trace(record_trace);
    let mut driver = Driver::new(cluster, requests, offered_rate, None)?;
    driver.run_to_end(SimTime::MAX)?;
    let summary = driver.summary();
    Ok((summary, driver.take_trace()))
}
