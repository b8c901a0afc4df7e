use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{TraceKind, TraceRecord};
use super::{FaultAction, FaultRule, LinkModel, NetError, ProcessingModel, SimTime};
use crate::node::{Action, Addr, Node};
use crate::wire::{Frame, KvOp, ProtocolKind};

const DEFAULT_EVENT_LIMIT: u64 = 200_000_000;

/// A message in flight.
#[derive(Debug, Clone)]
struct SimEvent {
    sent_at: SimTime,
    src: Addr,
    dst: Addr,
    reply_to: Addr,
    tag: u64,
    protocol: ProtocolKind,
    payload: Vec<u8>,
}

#[derive(Debug, Clone)]
enum Scheduled {
    Deliver(SimEvent),
    Inject {
        src: Addr,
        dst: Addr,
        frame: Frame,
        reply_to: Addr,
        tag: u64,
    },
    Timer(u64),
}

#[derive(Debug)]
struct Entry {
    at: SimTime,
    seqno: u64,
    item: Scheduled,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seqno) == (other.at, other.seqno)
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed so the max-heap pops the earliest (time, seqno) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seqno).cmp(&(self.at, self.seqno))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientDelivery {
    pub at: SimTime,
    pub client: Addr,
    pub src: Addr,
    pub tag: u64,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimOutput {
    Client(ClientDelivery),
    Timer { at: SimTime, token: u64 },
    /// A frame was removed by a fault rule or rejected by a node. Only
    /// produced after [`Simulator::set_report_drops`].
    Dropped {
        at: SimTime,
        tag: u64,
        op: KvOp,
        reply_to: Addr,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub sent: u64,
    pub delivered: u64,
    pub client_deliveries: u64,
    pub fault_drops: u64,
    pub lost: u64,
    pub rejects: u64,
    pub malformed: u64,
    pub events: u64,
}

enum Endpoint {
    Node(Box<Node>),
    Client,
}

/// Single-threaded discrete-event network of chain nodes and clients.
///
/// Events are processed in `(time, seqno)` order and every link is FIFO.
/// Given the same seed, registrations and calls, two simulators produce
/// identical traces.
pub struct Simulator {
    now: SimTime,
    seqno: u64,
    queue: BinaryHeap<Entry>,
    link: LinkModel,
    processing: ProcessingModel,
    endpoints: BTreeMap<Addr, Endpoint>,
    down: BTreeSet<Addr>,
    faults: Vec<(FaultRule, u64)>,
    rng: ChaCha8Rng,
    link_last: HashMap<(Addr, Addr), SimTime>,
    host_free: SimTime,
    node_free: HashMap<Addr, SimTime>,
    record_trace: bool,
    trace: Vec<TraceRecord>,
    trace_index: u64,
    stats: SimStats,
    event_limit: u64,
    report_drops: bool,
    notices: VecDeque<SimOutput>,
}

impl Simulator {
    pub fn new(link: LinkModel, processing: ProcessingModel, seed: u64) -> Self {
        Self {
            now: 0,
            seqno: 0,
            queue: BinaryHeap::new(),
            link,
            processing,
            endpoints: BTreeMap::new(),
            down: BTreeSet::new(),
            faults: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            link_last: HashMap::new(),
            host_free: 0,
            node_free: HashMap::new(),
            record_trace: true,
            trace: Vec::new(),
            trace_index: 0,
            stats: SimStats::default(),
            event_limit: DEFAULT_EVENT_LIMIT,
            report_drops: false,
            notices: VecDeque::new(),
        }
    }

    pub fn set_record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn set_report_drops(&mut self, on: bool) {
        self.report_drops = on;
    }

    pub fn set_event_limit(&mut self, limit: u64) {
        self.event_limit = limit;
    }

    pub fn link(&self) -> LinkModel {
        self.link
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), NetError> {
        let addr = node.addr();
        if self.endpoints.contains_key(&addr) {
            return Err(NetError::DuplicateEndpoint(addr));
        }
        self.endpoints.insert(addr, Endpoint::Node(Box::new(node)));
        Ok(())
    }

    pub fn add_client(&mut self, addr: Addr) -> Result<(), NetError> {
        if self.endpoints.contains_key(&addr) {
            return Err(NetError::DuplicateEndpoint(addr));
        }
        self.endpoints.insert(addr, Endpoint::Client);
        Ok(())
    }

    pub fn node(&self, addr: Addr) -> Option<&Node> {
        match self.endpoints.get(&addr) {
            Some(Endpoint::Node(n)) => Some(n),
            _ => None,
        }
    }

    pub fn node_mut(&mut self, addr: Addr) -> Option<&mut Node> {
        match self.endpoints.get_mut(&addr) {
            Some(Endpoint::Node(n)) => Some(n),
            _ => None,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.endpoints.values().filter_map(|e| match e {
            Endpoint::Node(n) => Some(n.as_ref()),
            Endpoint::Client => None,
        })
    }

    /// Marks an endpoint as failed: it stops processing and everything
    /// delivered to it is lost.
    pub fn kill(&mut self, addr: Addr) {
        self.down.insert(addr);
    }

    pub fn revive(&mut self, addr: Addr) {
        self.down.remove(&addr);
    }

    pub fn is_up(&self, addr: Addr) -> bool {
        self.endpoints.contains_key(&addr) && !self.down.contains(&addr)
    }

    pub fn add_fault(&mut self, rule: FaultRule) {
        self.faults.push((rule, 0));
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
    }

    /// Puts a message on the wire now. Returns its delivery time, or `None`
    /// when a fault rule dropped it.
    pub fn send(
        &mut self,
        src: Addr,
        dst: Addr,
        frame: &Frame,
        reply_to: Addr,
        tag: u64,
    ) -> Result<Option<SimTime>, NetError> {
        if !self.endpoints.contains_key(&dst) {
            return Err(NetError::UnknownEndpoint(dst));
        }
        if !self.endpoints.contains_key(&src) {
            return Err(NetError::UnknownEndpoint(src));
        }
        let payload = frame.encode().map_err(|e| NetError::Encode(e.to_string()))?;
        let event = SimEvent {
            sent_at: self.now,
            src,
            dst,
            reply_to,
            tag,
            protocol: frame.protocol(),
            payload,
        };
        self.stats.sent += 1;
        if self.fault_drops(src, dst, frame.op()) {
            self.stats.fault_drops += 1;
            self.record(&event, self.now, TraceKind::FaultDrop, frame, None);
            self.notify_drop(tag, frame.op(), reply_to);
            return Ok(None);
        }
        let at = self.delivery_time(&event);
        self.push(at, Scheduled::Deliver(event));
        Ok(Some(at))
    }

    /// Schedules a client request to be sent at `at`.
    pub fn inject_at(
        &mut self,
        at: SimTime,
        src: Addr,
        dst: Addr,
        frame: Frame,
        reply_to: Addr,
        tag: u64,
    ) -> Result<(), NetError> {
        if at < self.now {
            return Err(NetError::InThePast { at, now: self.now });
        }
        for a in [src, dst] {
            if !self.endpoints.contains_key(&a) {
                return Err(NetError::UnknownEndpoint(a));
            }
        }
        self.push(
            at,
            Scheduled::Inject {
                src,
                dst,
                frame,
                reply_to,
                tag,
            },
        );
        Ok(())
    }

    pub fn set_timer(&mut self, at: SimTime, token: u64) -> Result<(), NetError> {
        if at < self.now {
            return Err(NetError::InThePast { at, now: self.now });
        }
        self.push(at, Scheduled::Timer(token));
        Ok(())
    }

    /// Carries out actions produced by `from` outside of frame handling,
    /// e.g. acknowledgements issued by a freshly promoted tail.
    pub fn emit(&mut self, from: Addr, actions: Vec<Action>, reply_to: Addr, tag: u64) {
        self.apply_actions(from, actions, reply_to, tag, None);
    }

    /// Processes events until one yields output for the caller, the queue
    /// empties, or the next event lies beyond `limit`.
    pub fn step(&mut self, limit: SimTime) -> Result<Option<SimOutput>, NetError> {
        loop {
            if let Some(n) = self.notices.pop_front() {
                return Ok(Some(n));
            }
            match self.queue.peek() {
                Some(e) if e.at <= limit => {}
                _ => return Ok(None),
            }
            let Entry { at, item, .. } = self.queue.pop().expect("peeked");
            self.stats.events += 1;
            if self.stats.events > self.event_limit {
                return Err(NetError::Runaway(self.event_limit));
            }
            self.now = at;
            match item {
                Scheduled::Timer(token) => return Ok(Some(SimOutput::Timer { at, token })),
                Scheduled::Inject {
                    src,
                    dst,
                    frame,
                    reply_to,
                    tag,
                } => {
                    self.send(src, dst, &frame, reply_to, tag)?;
                }
                Scheduled::Deliver(event) => {
                    if let Some(out) = self.deliver(event) {
                        return Ok(Some(SimOutput::Client(out)));
                    }
                }
            }
        }
    }

    /// Processes every event up to and including `t`, then advances the
    /// clock to `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<Vec<SimOutput>, NetError> {
        let mut out = Vec::new();
        while let Some(o) = self.step(t)? {
            out.push(o);
        }
        self.now = self.now.max(t);
        Ok(out)
    }

    /// Runs until no events remain or the clock would pass `max_time`.
    pub fn run_until_quiescent(&mut self, max_time: SimTime) -> Result<Vec<SimOutput>, NetError> {
        let mut out = Vec::new();
        while let Some(o) = self.step(max_time)? {
            out.push(o);
        }
        Ok(out)
    }

    fn notify_drop(&mut self, tag: u64, op: KvOp, reply_to: Addr) {
        if self.report_drops {
            self.notices.push_back(SimOutput::Dropped {
                at: self.now,
                tag,
                op,
                reply_to,
            });
        }
    }

    fn push(&mut self, at: SimTime, item: Scheduled) {
        let seqno = self.seqno;
        self.seqno += 1;
        self.queue.push(Entry { at, seqno, item });
    }

    fn fault_drops(&mut self, src: Addr, dst: Addr, op: KvOp) -> bool {
        let mut drop = false;
        for (rule, seen) in &mut self.faults {
            if !rule.packet.matches(src, dst, op) {
                continue;
            }
            *seen += 1;
            drop |= match rule.action {
                FaultAction::DropNth(k) => *seen == k,
                FaultAction::DropAll => true,
                FaultAction::DropWithProbability(p) => self.rng.gen_bool(p.clamp(0.0, 1.0)),
            };
        }
        drop
    }

    fn delivery_time(&mut self, event: &SimEvent) -> SimTime {
        let arrive = self.now + self.link.propagation_ns;
        let service = self.link.service_ns(event.payload.len());
        let done = match self.processing {
            ProcessingModel::Unlimited => arrive + service,
            ProcessingModel::SharedHost => {
                let start = arrive.max(self.host_free);
                self.host_free = start + service;
                self.host_free
            }
            ProcessingModel::PerNode => {
                if matches!(self.endpoints.get(&event.dst), Some(Endpoint::Node(_))) {
                    let free = self.node_free.entry(event.dst).or_insert(0);
                    let start = arrive.max(*free);
                    *free = start + service;
                    *free
                } else {
                    arrive + service
                }
            }
        };
        let last = self.link_last.entry((event.src, event.dst)).or_insert(0);
        let at = done.max(*last);
        *last = at;
        at
    }

    fn deliver(&mut self, event: SimEvent) -> Option<ClientDelivery> {
        if self.down.contains(&event.dst) {
            self.stats.lost += 1;
            if let Ok(frame) = Frame::decode(event.protocol, &event.payload) {
                self.record(&event, self.now, TraceKind::Lost, &frame, None);
            }
            return None;
        }
        let frame = match Frame::decode(event.protocol, &event.payload) {
            Ok(f) => f,
            Err(e) => {
                self.stats.malformed += 1;
                let placeholder = Frame::Netcraq(crate::wire::NetcraqFrame::new(KvOp::Read, 0, 0));
                self.record(
                    &event,
                    self.now,
                    TraceKind::Malformed,
                    &placeholder,
                    Some(e.to_string()),
                );
                return None;
            }
        };
        self.stats.delivered += 1;
        self.record(&event, self.now, TraceKind::Deliver, &frame, None);
        let actions = match self.endpoints.get_mut(&event.dst) {
            Some(Endpoint::Node(node)) => node.handle(&frame, event.reply_to),
            Some(Endpoint::Client) => {
                self.stats.client_deliveries += 1;
                return Some(ClientDelivery {
                    at: self.now,
                    client: event.dst,
                    src: event.src,
                    tag: event.tag,
                    frame,
                });
            }
            None => return None,
        };
        self.apply_actions(event.dst, actions, event.reply_to, event.tag, Some((&event, &frame)));
        None
    }

    fn apply_actions(
        &mut self,
        from: Addr,
        actions: Vec<Action>,
        reply_to: Addr,
        tag: u64,
        incoming: Option<(&SimEvent, &Frame)>,
    ) {
        for action in actions {
            let result = match action {
                Action::Send { dest, frame } => {
                    self.send(from, dest, &frame, reply_to, tag).map(|_| ())
                }
                Action::Reply { client, frame } => {
                    self.send(from, client, &frame, client, tag).map(|_| ())
                }
                Action::Multicast { frame } => {
                    let members = self
                        .node(from)
                        .map(|n| n.ctx().multicast_members.clone())
                        .unwrap_or_default();
                    members
                        .into_iter()
                        .try_for_each(|m| self.send(from, m, &frame, reply_to, tag).map(|_| ()))
                }
                Action::Drop { reason } => {
                    self.stats.rejects += 1;
                    if let Some((_, frame)) = incoming {
                        self.notify_drop(tag, frame.op(), reply_to);
                    }
                    if let Some((event, frame)) = incoming {
                        let reason = serde_json::to_value(reason)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string));
                        self.record_at(event, from, from, TraceKind::Reject, frame, reason);
                    }
                    Ok(())
                }
            };
            if let Err(e) = result {
                // Routing to an address that was never registered: count it
                // as lost rather than aborting the run.
                self.stats.lost += 1;
                if let Some((event, frame)) = incoming {
                    self.record_at(event, from, from, TraceKind::Lost, frame, Some(e.to_string()));
                }
            }
        }
    }

    fn record(
        &mut self,
        event: &SimEvent,
        time: SimTime,
        kind: TraceKind,
        frame: &Frame,
        reason: Option<String>,
    ) {
        debug_assert_eq!(time, self.now);
        self.record_at(event, event.src, event.dst, kind, frame, reason);
    }

    fn record_at(
        &mut self,
        event: &SimEvent,
        src: Addr,
        dst: Addr,
        kind: TraceKind,
        frame: &Frame,
        reason: Option<String>,
    ) {
        if !self.record_trace {
            return;
        }
        let index = self.trace_index;
        self.trace_index += 1;
        self.trace.push(TraceRecord {
            index,
            time: self.now,
            sent: event.sent_at,
            kind,
            src,
            dst,
            reply_to: event.reply_to,
            tag: event.tag,
            protocol: event.protocol,
            op: frame.op(),
            key: frame.key(),
            value: frame.value(),
            size: event.payload.len(),
            reason,
        });
    }
}
