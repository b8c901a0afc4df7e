//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! prints one PASS/FAIL line per criterion and exits nonzero on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use netcraq::bench::{
    self, BenchSettings, ChainSpec, Cluster, FailureScenario, Measured, Request, RunSummary,
    Target, WorkloadSpec, CLIENT_BASE,
};
use netcraq::net::{
    write_trace, FaultRule, PacketMatch, SimTime, TraceKind, TraceRecord,
};
use netcraq::node::{Action, Addr, DropReason, Node, NodeContext, NodeRole, MAX_SEQ};
use netcraq::store::StoreConfig;
use netcraq::verify::{
    brute_force_oracle, check_per_key, history_from_trace, oracle, tagged_value, version_of,
    HistoryEntry, OpKind, Outcome,
};
use netcraq::wire::{
    decode_baseline, decode_netcraq, encode_baseline, encode_netcraq, BaselineFrame, Frame, KvOp,
    NetcraqFrame, ProtocolKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const CLIENT: Addr = Addr(CLIENT_BASE);

// ---------------------------------------------------------------- helpers

/// Field widths of the baseline header, summed independently of the codec.
fn baseline_len_oracle(sc: usize) -> usize {
    let op = 1;
    let key = 4;
    let value = 16;
    let seq = 2;
    let sc_field = 1;
    let cursor = 1;
    op + key + value + seq + sc_field + cursor + 4 * sc
}

/// Expected per-query wire messages for an n-node chain.
struct CountLaw {
    n: u64,
}

impl CountLaw {
    fn netcraq_clean_read(&self) -> u64 {
        2
    }
    fn netcraq_dirty_read_off_tail(&self) -> u64 {
        3
    }
    fn netcraq_write_chain_hops(&self) -> u64 {
        self.n
    }
    fn netcraq_write_multicast(&self) -> u64 {
        self.n - 1
    }
    fn baseline_read_at_head(&self) -> u64 {
        2 * self.n
    }
    fn baseline_write(&self) -> u64 {
        self.n + 1
    }
}

fn cluster(protocol: ProtocolKind, n: usize, store: StoreConfig) -> Cluster {
    let spec = ChainSpec {
        store,
        ..ChainSpec::new(protocol, n)
    };
    let mut c = Cluster::new(&spec).unwrap();
    c.sim_mut().add_client(CLIENT).unwrap();
    c
}

fn send(c: &mut Cluster, op: KvOp, key: u32, value: u128, entry: usize, tag: u64) {
    let frame = c.request_frame(op, key, value, entry);
    let dst = c.chain()[entry];
    c.sim_mut().send(CLIENT, dst, &frame, CLIENT, tag).unwrap();
    c.sim_mut().run_until_quiescent(SimTime::MAX).unwrap();
}

fn delivered(trace: &[TraceRecord], tag: u64) -> Vec<&TraceRecord> {
    trace
        .iter()
        .filter(|r| r.tag == tag && r.kind == TraceKind::Deliver)
        .collect()
}

fn replies(trace: &[TraceRecord], tag: u64) -> Vec<u128> {
    delivered(trace, tag)
        .into_iter()
        .filter(|r| r.dst == CLIENT && r.op == KvOp::ReadReply)
        .map(|r| r.value)
        .collect()
}

fn trace_bytes(trace: &[TraceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace).unwrap();
    buf
}

fn fast_settings() -> BenchSettings {
    BenchSettings {
        ops_per_point: 4_000,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- criteria

fn c1_wire() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let f = NetcraqFrame::new(KvOp::ALL[rng.gen_range(0..4)], rng.gen(), rng.gen());
        let bytes = encode_netcraq(&f);
        ensure!(bytes.len() == 21, "NetCRAQ frame is {} bytes", bytes.len());
        ensure!(decode_netcraq(&bytes) == Ok(f), "NetCRAQ round trip failed for {f:?}");
    }
    for _ in 0..10_000 {
        let sc = rng.gen_range(1..=64usize);
        let f = BaselineFrame {
            op: KvOp::ALL[rng.gen_range(0..4)],
            key: rng.gen(),
            value: rng.gen(),
            seq: rng.gen(),
            nodes: (0..sc).map(|_| rng.gen()).collect(),
            cursor: rng.gen_range(0..sc) as u8,
        };
        let bytes = encode_baseline(&f).map_err(|e| e.to_string())?;
        ensure!(
            bytes.len() == baseline_len_oracle(sc),
            "baseline frame with {sc} nodes is {} bytes",
            bytes.len()
        );
        ensure!(decode_baseline(&bytes).as_ref() == Ok(&f), "baseline round trip failed");
    }
    let delta = baseline_len_oracle(5) - baseline_len_oracle(4);
    ensure!(delta * 8 == 32, "per-node growth is {delta} bytes");
    Ok("20,000 frames round-trip; NetCRAQ 21 B; baseline 25+4*sc B".into())
}

fn c2_message_counts() -> Check {
    let law = CountLaw { n: 4 };
    let store = StoreConfig::default();

    for entry in 0..4 {
        let mut c = cluster(ProtocolKind::Netcraq, 4, store);
        send(&mut c, KvOp::Read, 7, 0, entry, 1);
        let n = delivered(c.sim().trace(), 1).len() as u64;
        ensure!(n == law.netcraq_clean_read(), "clean read at {entry}: {n} messages");
    }

    // Make key 7 dirty everywhere but the tail by losing the last hop.
    for entry in 0..3 {
        let mut c = cluster(ProtocolKind::Netcraq, 4, store);
        c.sim_mut().add_fault(FaultRule::drop_all(PacketMatch {
            src: Some(Addr(3)),
            dst: Some(Addr(4)),
            op: Some(KvOp::Write),
        }));
        send(&mut c, KvOp::Write, 7, 5, 0, 1);
        send(&mut c, KvOp::Read, 7, 0, entry, 2);
        let n = delivered(c.sim().trace(), 2).len() as u64;
        ensure!(n == law.netcraq_dirty_read_off_tail(), "dirty read at {entry}: {n} messages");
    }

    let mut c = cluster(ProtocolKind::Netcraq, 4, store);
    send(&mut c, KvOp::Write, 7, 5, 0, 1);
    let d = delivered(c.sim().trace(), 1);
    let chain = d.iter().filter(|r| r.op == KvOp::Write).count() as u64;
    let client_ack = d.iter().filter(|r| r.op == KvOp::Ack && r.dst == CLIENT).count() as u64;
    let mcast = d.iter().filter(|r| r.op == KvOp::Ack && r.dst != CLIENT).count() as u64;
    ensure!(
        (chain, client_ack, mcast) == (law.netcraq_write_chain_hops(), 1, law.netcraq_write_multicast()),
        "NetCRAQ write: {chain} chain + {client_ack} client ACK + {mcast} multicast"
    );

    let mut c = cluster(ProtocolKind::Baseline, 4, store);
    send(&mut c, KvOp::Read, 7, 0, 0, 1);
    let n = delivered(c.sim().trace(), 1).len() as u64;
    ensure!(n == law.baseline_read_at_head(), "baseline read at head: {n}");
    send(&mut c, KvOp::Write, 7, 5, 0, 2);
    let n = delivered(c.sim().trace(), 2).len() as u64;
    ensure!(n == law.baseline_write(), "baseline write: {n}");
    Ok("clean 2, dirty 3, NetCRAQ write 4+1+3, baseline read 8, baseline write 5".into())
}

fn c3_distance() -> Check {
    let points = bench::run_distance_sweep(&fast_settings(), 4).map_err(|e| e.to_string())?;
    let of = |p: ProtocolKind| -> Vec<&Measured> {
        points.iter().filter(|m| m.row.protocol == p).collect()
    };
    let craq = of(ProtocolKind::Netcraq);
    let qps: Vec<f64> = craq.iter().map(|m| m.row.completed_qps).collect();
    ensure!(
        qps.windows(2).all(|w| w[0] == w[1]),
        "NetCRAQ QPS differs across distances: {qps:?}"
    );
    let base = of(ProtocolKind::Baseline);
    let lat: Vec<SimTime> = base.iter().map(|m| m.unloaded_latency_ns).collect();
    ensure!(
        lat.windows(2).all(|w| w[0] < w[1]),
        "baseline latency not increasing with distance: {lat:?}"
    );
    let msgs: Vec<f64> = base.iter().map(|m| m.row.msgs_per_query).collect();
    ensure!(
        msgs.iter().enumerate().all(|(d, &m)| m == 2.0 * (d as f64 + 1.0)),
        "baseline messages per query {msgs:?}"
    );
    Ok(format!(
        "NetCRAQ {:.0} q/s at every distance; baseline latency {:?} us",
        qps[0],
        lat.iter().map(|l| l / 1000).collect::<Vec<_>>()
    ))
}

fn c4_scaling() -> Check {
    let lengths: Vec<usize> = (4..=8).collect();
    let points = bench::run_chain_scaling(&fast_settings(), &lengths).map_err(|e| e.to_string())?;
    let get = |p: ProtocolKind, n: usize| {
        points
            .iter()
            .find(|m| m.row.protocol == p && m.row.chain_length == n)
            .expect("row present")
    };
    for &n in &lengths {
        let craq = get(ProtocolKind::Netcraq, n).row.msgs_per_query;
        let base = get(ProtocolKind::Baseline, n).row.msgs_per_query;
        let law = CountLaw { n: n as u64 };
        ensure!(craq == law.netcraq_clean_read() as f64, "NetCRAQ n={n}: {craq} msgs/read");
        ensure!(base == law.baseline_read_at_head() as f64, "baseline n={n}: {base} msgs/read");
    }
    let msg_ratio = get(ProtocolKind::Baseline, 8).row.msgs_per_query
        / get(ProtocolKind::Netcraq, 8).row.msgs_per_query;
    ensure!(msg_ratio == 8.0, "message ratio at n=8 is {msg_ratio}");
    let qps_ratio = get(ProtocolKind::Netcraq, 8).row.completed_qps
        / get(ProtocolKind::Baseline, 8).row.completed_qps;
    ensure!((6.0..=12.0).contains(&qps_ratio), "QPS ratio at n=8 is {qps_ratio:.2}");
    let b4 = get(ProtocolKind::Baseline, 4).row.completed_qps;
    let b8 = get(ProtocolKind::Baseline, 8).row.completed_qps;
    ensure!(b8 < b4, "baseline QPS n=8 {b8} not below n=4 {b4}");
    Ok(format!(
        "message ratio 8; simulated QPS ratio {qps_ratio:.2}; baseline n=4 {b4:.0} -> n=8 {b8:.0} q/s"
    ))
}

fn c5_mixed() -> Check {
    let fractions = [0.0, 0.25, 0.5, 0.75];
    let settings = BenchSettings {
        ops_per_point: 20_000,
        ..Default::default()
    };
    let points = bench::run_mixed_workload(&settings, 4, &fractions).map_err(|e| e.to_string())?;
    let series = |p: ProtocolKind| -> Vec<&RunSummary> {
        points
            .iter()
            .filter(|m| m.row.protocol == p)
            .map(|m| &m.summary)
            .collect()
    };
    let craq = series(ProtocolKind::Netcraq);
    let base = series(ProtocolKind::Baseline);
    let dirty: Vec<u64> = craq.iter().map(|s| s.dirty_commits).collect();
    ensure!(dirty[0] == 0, "dirty commits at fraction 0: {}", dirty[0]);
    ensure!(
        dirty.windows(2).all(|w| w[0] < w[1]),
        "dirty commits not strictly increasing: {dirty:?}"
    );
    let mut factors = Vec::new();
    for (i, f) in fractions.iter().enumerate() {
        ensure!(
            craq[i].read_qps > base[i].read_qps,
            "write fraction {f}: NetCRAQ read QPS {:.0} <= baseline {:.0}",
            craq[i].read_qps,
            base[i].read_qps
        );
        factors.push(format!("{:.2}x", craq[i].read_qps / base[i].read_qps));
    }
    Ok(format!("dirty commits {dirty:?}; read QPS advantage {}", factors.join(", ")))
}

fn c6_consistency() -> Check {
    let spec = ChainSpec::new(ProtocolKind::Netcraq, 4);
    let w = WorkloadSpec {
        total_ops: 100_000,
        write_fraction: 0.25,
        rate: 100_000.0,
        target: Target::RoundRobin,
        seed: 6,
        ..Default::default()
    };
    let reqs = bench::generate(&w, 4, spec.store.num_keys).map_err(|e| e.to_string())?;
    let (summary, trace) = bench::run_requests(&spec, reqs, w.rate, true).map_err(|e| e.to_string())?;
    ensure!(summary.completed == 100_000, "only {} ops completed", summary.completed);
    let history = history_from_trace(&trace);
    let verdict = check_per_key(&history).map_err(|e| e.to_string())?;
    ensure!(verdict.passed(), "violations in fault-free run:\n{}", verdict.report());

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut agree, mut accepted) = (0, 0);
    for _ in 0..10_000 {
        let h = oracle::random_history(&mut rng, oracle::ORACLE_OP_LIMIT);
        let o = brute_force_oracle(&h).map_err(|e| e.to_string())?;
        let g = check_per_key(&h).map_err(|e| e.to_string())?.passed();
        ensure!(o == g, "oracle {o} vs checker {g} on {h:?}");
        agree += 1;
        accepted += o as u32;
    }

    // Corrupt one read that followed an acknowledged write: make it return
    // the initial version.
    let acked_before = |r: &HistoryEntry| {
        history.iter().any(|w| {
            w.kind == OpKind::Write
                && w.key == r.key
                && w.outcome == Outcome::Acked
                && w.complete.is_some_and(|c| c < r.invoke)
        })
    };
    let candidates: Vec<usize> = history
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.outcome, Outcome::Returned(v) if v != 0) && acked_before(e))
        .map(|(i, _)| i)
        .collect();
    ensure!(!candidates.is_empty(), "no read to corrupt");
    let mut corrupted = history.clone();
    let idx = candidates[rng.gen_range(0..candidates.len())];
    corrupted[idx].outcome = Outcome::Returned(0);
    let bad = check_per_key(&corrupted).map_err(|e| e.to_string())?;
    ensure!(!bad.passed(), "corrupted history accepted");
    Ok(format!(
        "{} ops, 0 violations; oracle agrees on {agree} histories ({accepted} consistent); corruption of op {} rejected",
        history.len(),
        corrupted[idx].id
    ))
}

fn c7_write_loss() -> Check {
    let v1 = tagged_value(1, 0);
    let v2 = tagged_value(2, 0);
    let mut c = cluster(ProtocolKind::Netcraq, 4, StoreConfig::default());
    send(&mut c, KvOp::Write, 3, v1, 0, 1);
    c.sim_mut().add_fault(FaultRule::drop_all(PacketMatch {
        src: Some(Addr(2)),
        dst: Some(Addr(3)),
        op: Some(KvOp::Write),
    }));
    send(&mut c, KvOp::Write, 3, v2, 0, 2);
    let mut seen = Vec::new();
    for entry in 0..4 {
        let tag = 10 + entry as u64;
        send(&mut c, KvOp::Read, 3, 0, entry, tag);
        let r = replies(c.sim().trace(), tag);
        ensure!(r.len() == 1, "read at node {entry} got {} replies", r.len());
        seen.push(version_of(r[0]));
    }
    ensure!(seen == vec![1, 1, 1, 1], "versions read after lost write: {seen:?}");
    let verdict = check_per_key(&history_from_trace(c.sim().trace())).map_err(|e| e.to_string())?;
    ensure!(verdict.passed(), "{}", verdict.report());
    Ok("write lost before tail; reads at all 4 nodes return the previous version".into())
}

fn c8_overflow() -> Check {
    let store = StoreConfig::new(16, 4).map_err(|e| e.to_string())?;
    let mut c = cluster(ProtocolKind::Netcraq, 4, store);
    c.sim_mut().add_fault(FaultRule::drop_all(PacketMatch {
        src: None,
        dst: Some(Addr(4)),
        op: Some(KvOp::Write),
    }));
    for i in 1..=4u64 {
        send(&mut c, KvOp::Write, 2, tagged_value(i, 0), 0, i);
    }
    let head_rejects: Vec<(u64, Option<String>)> = c
        .sim()
        .trace()
        .iter()
        .filter(|r| r.kind == TraceKind::Reject && r.src == Addr(1))
        .map(|r| (r.tag, r.reason.clone()))
        .collect();
    ensure!(
        head_rejects == vec![(4, Some("overflow".to_string()))],
        "head rejects {head_rejects:?}"
    );

    let ctx = NodeContext {
        my_id: Addr(1),
        role: NodeRole::Head,
        tail: Addr(2),
        successor: Some(Addr(2)),
        multicast_members: vec![Addr(2)],
        epoch: 1,
        writes_enabled: true,
    };
    let mut head = Node::new(ctx, ProtocolKind::Baseline, StoreConfig::new(4, 2).unwrap())
        .map_err(|e| e.to_string())?;
    let path = [Addr(1), Addr(2)];
    let mut first_failure = None;
    for i in 1..=(MAX_SEQ as u64 + 1) {
        let f = netcraq::node::baseline_request(KvOp::Write, (i % 4) as u32, i as u128, &path);
        let actions = head.handle(&Frame::Baseline(f), CLIENT);
        if let Some(Action::Drop { reason }) = actions.first() {
            first_failure = Some((i, *reason));
            break;
        }
    }
    ensure!(
        first_failure == Some((65_536, DropReason::SequenceExhausted)),
        "baseline first failure {first_failure:?}"
    );
    Ok("4th pending write dropped with V=4; baseline exhausts at write 65,536".into())
}

fn c9_failure() -> Check {
    let s = FailureScenario::standard(ChainSpec::new(ProtocolKind::Netcraq, 4));
    let r = bench::run_failure_scenario(&s).map_err(|e| e.to_string())?;
    ensure!(
        !r.chain_after_phase1.contains(&r.victim) && r.chain_after_phase1.len() == 3,
        "phase 1 chain {:?}",
        r.chain_after_phase1
    );
    ensure!(r.reads_between_phases > 0, "no reads completed after phase 1");
    ensure!(r.snapshot_identical, "replacement store differs from donor snapshot");
    ensure!(r.commits_while_disabled == 0, "{} commits while disabled", r.commits_while_disabled);
    ensure!(r.writes_rejected_while_disabled > 0, "no write hit the disabled window");
    ensure!(r.final_chain.len() == 4, "final chain {:?}", r.final_chain);
    ensure!(r.verdict.passed(), "{}", r.verdict.report());
    Ok(format!(
        "detected at {} us; {} reads between phases; {} writes rejected while disabled; {} ops verified",
        r.detected_at / 1000,
        r.reads_between_phases,
        r.writes_rejected_while_disabled,
        r.verdict.ops
    ))
}

fn c10_determinism() -> Check {
    let run = || {
        let spec = ChainSpec::new(ProtocolKind::Netcraq, 4);
        let w = WorkloadSpec {
            total_ops: 5_000,
            write_fraction: 0.25,
            rate: 150_000.0,
            arrivals: bench::Arrivals::Poisson,
            seed: 10,
            ..Default::default()
        };
        let reqs: Vec<Request> = bench::generate(&w, 4, 1024).unwrap();
        let (_, trace) = bench::run_requests(&spec, reqs, w.rate, true).unwrap();
        trace_bytes(&trace)
    };
    ensure!(run() == run(), "traces differ between runs");

    let settings = BenchSettings {
        ops_per_point: 2_000,
        ..Default::default()
    };
    let csv = || {
        let points = bench::run_latency_sweep(&settings, 4, &[20_000.0, 80_000.0]).unwrap();
        let mut buf = Vec::new();
        bench::write_csv(&mut buf, &bench::rows(&points)).unwrap();
        buf
    };
    ensure!(csv() == csv(), "CSV output differs between runs");

    let s = FailureScenario {
        workload: WorkloadSpec {
            total_ops: 3_000,
            ..FailureScenario::standard(ChainSpec::new(ProtocolKind::Netcraq, 4)).workload
        },
        kill_at: 30_000_000,
        ..FailureScenario::standard(ChainSpec::new(ProtocolKind::Netcraq, 4))
    };
    let a = bench::run_failure_scenario(&s).map_err(|e| e.to_string())?;
    let b = bench::run_failure_scenario(&s).map_err(|e| e.to_string())?;
    ensure!(trace_bytes(&a.trace) == trace_bytes(&b.trace), "failure traces differ");
    Ok("traces and CSVs byte-identical across reruns".into())
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 10] = [
        ("wire round-trip", Duration::from_secs(1), c1_wire),
        ("message-count law", Duration::from_secs(1), c2_message_counts),
        ("distance independence", Duration::from_secs(60), c3_distance),
        ("chain scaling", Duration::from_secs(10), c4_scaling),
        ("mixed workloads", Duration::from_secs(30), c5_mixed),
        ("consistency", Duration::from_secs(60), c6_consistency),
        ("write-loss semantics", Duration::from_secs(1), c7_write_loss),
        ("overflow semantics", Duration::from_secs(1), c8_overflow),
        ("failure recovery", Duration::from_secs(30), c9_failure),
        ("determinism", Duration::from_secs(60), c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == id || name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > *limit => Err(format!("{msg}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("criterion {id:>2} {name}: PASS ({took:.2?}) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({took:.2?}) {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
