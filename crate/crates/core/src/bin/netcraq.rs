//! Command-line front end: simulate, benchmark, verify traces and run
//! nodes over UDP.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use netcraq::bench::{bench_all, generate, run_failure_scenario, run_requests};
use netcraq::config::RunConfig;
use netcraq::controller::{build_chain, detect_failure, ChainConfig, Controller, HeartbeatTable, Member};
use netcraq::net::udp::{AddressBook, ControlMsg, UdpClient, UdpNode};
use netcraq::net::{read_trace, write_trace, TraceRecord};
use netcraq::node::{baseline_request, Addr, Node};
use netcraq::verify::{check_per_key, history_from_trace, Verdict};
use netcraq::wire::{Frame, KvOp, NetcraqFrame, ProtocolKind};

#[derive(Parser)]
#[command(name = "netcraq", version, about = "Chain replication with apportioned reads")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    #[arg(long, global = true)]
    chain_length: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulated workload, or the failure scenario if configured.
    Sim,
    /// Run the four standard experiments and write their CSVs.
    BenchAll,
    /// Check a JSONL trace for consistency violations.
    Check {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Serve one chain node over UDP.
    Serve {
        /// Position of this node in `endpoints`.
        #[arg(long)]
        index: usize,
    },
    /// Control a chain of UDP nodes.
    Ctl {
        #[command(subcommand)]
        action: CtlAction,
    },
}

#[derive(Subcommand)]
enum CtlAction {
    /// Push the initial role assignment to every node.
    Install,
    /// Ping every node once.
    Ping,
    /// Read a key through the node at `node` (0 is the head).
    Read {
        #[arg(long)]
        key: u32,
        #[arg(long, default_value_t = 0)]
        node: usize,
    },
    /// Write a value through the head.
    Write {
        #[arg(long)]
        key: u32,
        #[arg(long)]
        value: u128,
    },
    /// Heartbeat the chain and redirect around failed nodes.
    Monitor {
        #[arg(long, default_value_t = 20)]
        rounds: u32,
    },
}

fn parse_protocol(s: &str) -> Result<ProtocolKind, String> {
    match s {
        "netcraq" => Ok(ProtocolKind::Netcraq),
        "baseline" => Ok(ProtocolKind::Baseline),
        other => Err(format!("unknown protocol {other:?} (netcraq or baseline)")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.protocol {
        cfg.protocol = p;
    }
    if let Some(n) = cli.chain_length {
        cfg.chain.nodes = n;
        cfg.experiments.chain_length = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_trace(&mut out, trace)?;
    out.flush()?;
    Ok(())
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn verdict_exit(verdict: &Verdict) -> ExitCode {
    println!("{}", verdict.report().trim_end());
    if verdict.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn sim(cfg: &RunConfig, out_dir: &Path) -> Result<ExitCode> {
    create_out_dir(out_dir)?;
    let trace_path = out_dir.join("trace.jsonl");
    let summary_path = out_dir.join("summary.json");
    if let Some(scenario) = cfg.failure_scenario() {
        let report = run_failure_scenario(&scenario)?;
        save_trace(&trace_path, &report.trace)?;
        save_json(&summary_path, &report)?;
        println!(
            "victim {} detected at {} us; writes disabled {}..{} us; replacement {} from donor {}",
            report.victim,
            report.detected_at / 1_000,
            report.writes_disabled_at / 1_000,
            report.writes_enabled_at / 1_000,
            report.replacement,
            report.donor,
        );
        println!(
            "reads between phases {}, commits while disabled {}, snapshot identical {}",
            report.reads_between_phases, report.commits_while_disabled, report.snapshot_identical
        );
        let ok = report.commits_while_disabled == 0 && report.snapshot_identical;
        let code = verdict_exit(&report.verdict);
        return Ok(if ok { code } else { ExitCode::FAILURE });
    }
    let spec = cfg.chain_spec();
    let workload = cfg.workload_spec();
    let requests = generate(&workload, spec.chain_length, spec.store.num_keys)?;
    let (summary, trace) = run_requests(&spec, requests, workload.rate, true)?;
    save_trace(&trace_path, &trace)?;
    save_json(&summary_path, &summary)?;
    println!(
        "{} n={}: {} of {} completed, {:.0} q/s, mean {:.1} us, p99 {:.1} us, {:.2} msgs/query",
        spec.protocol,
        spec.chain_length,
        summary.completed,
        summary.injected,
        summary.completed_qps,
        summary.mean_latency_ns / 1_000.0,
        summary.p99_latency_ns as f64 / 1_000.0,
        summary.msgs_per_query,
    );
    let verdict = check_per_key(&history_from_trace(&trace))?;
    Ok(verdict_exit(&verdict))
}

fn check(path: &Path) -> Result<ExitCode> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let trace = read_trace(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let verdict = check_per_key(&history_from_trace(&trace))?;
    Ok(verdict_exit(&verdict))
}

fn initial_chain(cfg: &RunConfig) -> Result<ChainConfig> {
    if cfg.endpoints.is_empty() {
        bail!("the config lists no endpoints");
    }
    let members = (0..cfg.endpoints.len() as u32)
        .map(|i| Member { id: i, addr: Addr(i + 1) })
        .collect();
    Ok(build_chain(members)?)
}

fn serve(cfg: &RunConfig, index: usize) -> Result<ExitCode> {
    let chain = initial_chain(cfg)?;
    let ctx = chain
        .contexts()
        .into_iter()
        .nth(index)
        .ok_or_else(|| anyhow!("index {index} outside the chain"))?;
    let node = Node::new(ctx, cfg.protocol, cfg.store()?)?;
    let server = UdpNode::spawn(node, cfg.endpoints[index], AddressBook::from_endpoints(&cfg.endpoints))?;
    println!("node {} serving on {}", index + 1, server.local_addr());
    server.wait()?;
    Ok(ExitCode::SUCCESS)
}

fn client(cfg: &RunConfig) -> Result<UdpClient> {
    let bind: SocketAddr = "0.0.0.0:0".parse().expect("valid address");
    Ok(UdpClient::bind(bind, cfg.client_timeout().max(Duration::from_millis(200)))?)
}

fn request_frame(cfg: &RunConfig, op: KvOp, key: u32, value: u128, entry: usize) -> Frame {
    match cfg.protocol {
        ProtocolKind::Netcraq => Frame::Netcraq(NetcraqFrame::new(op, key, value)),
        ProtocolKind::Baseline => {
            let path: Vec<Addr> = (entry as u32..cfg.endpoints.len() as u32).map(|i| Addr(i + 1)).collect();
            Frame::Baseline(baseline_request(op, key, value, &path))
        }
    }
}

fn ctl(cfg: &RunConfig, action: &CtlAction) -> Result<ExitCode> {
    let chain = initial_chain(cfg)?;
    let client = client(cfg)?;
    let book = AddressBook::from_endpoints(&cfg.endpoints);
    let endpoint = |a: Addr| book.get(a).ok_or_else(|| anyhow!("no endpoint for node {a}"));
    match action {
        CtlAction::Install => {
            for (addr, update) in chain.updates() {
                client.install(endpoint(addr)?, update)?;
                println!("node {addr}: installed");
            }
        }
        CtlAction::Ping => {
            let mut all_up = true;
            for (i, sock) in cfg.endpoints.iter().enumerate() {
                let start = Instant::now();
                match client.control(*sock, &ControlMsg::Ping { seq: i as u64 }) {
                    Ok(ControlMsg::Pong { id, .. }) => {
                        println!("node {id} at {sock}: {} us", start.elapsed().as_micros())
                    }
                    Ok(other) => bail!("unexpected reply {other:?}"),
                    Err(e) => {
                        all_up = false;
                        println!("node {} at {sock}: {e}", i + 1);
                    }
                }
            }
            if !all_up {
                return Ok(ExitCode::FAILURE);
            }
        }
        CtlAction::Read { key, node } => {
            let sock = *cfg.endpoints.get(*node).ok_or_else(|| anyhow!("node {node} outside the chain"))?;
            let reply = client.request(sock, &request_frame(cfg, KvOp::Read, *key, 0, *node))?;
            println!("key {key} = {}", reply.value());
        }
        CtlAction::Write { key, value } => {
            let reply = client.request(cfg.endpoints[0], &request_frame(cfg, KvOp::Write, *key, *value, 0))?;
            println!("key {key} <- {} ({})", reply.value(), reply.op().name());
        }
        CtlAction::Monitor { rounds } => monitor(cfg, chain, &client, &book, *rounds)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Heartbeats every member and runs the redirect phase for any that stop
/// answering. Replacement nodes are brought in through the simulator only.
fn monitor(cfg: &RunConfig, chain: ChainConfig, client: &UdpClient, book: &AddressBook, rounds: u32) -> Result<()> {
    let mut controller = Controller::new(chain);
    let mut table = HeartbeatTable::default();
    let period = Duration::from_micros(cfg.controller.heartbeat_period_us);
    let timeout_ns = cfg.controller.detection_timeout_us * 1_000;
    let start = Instant::now();
    for m in controller.config().members() {
        table.record(m.id, 0);
    }
    for round in 0..rounds {
        let now = start.elapsed().as_nanos() as u64;
        for m in controller.config().members().to_vec() {
            let Some(sock) = book.get(m.addr) else { continue };
            if let Ok(ControlMsg::Pong { .. }) = client.control(sock, &ControlMsg::Ping { seq: round as u64 }) {
                table.record(m.id, now);
            }
        }
        for id in detect_failure(&table, now, timeout_ns) {
            let redirect = controller.phase1_redirect(id, now)?;
            for (addr, update) in redirect.updates {
                if let Some(sock) = book.get(addr) {
                    client.install(sock, update)?;
                }
            }
            table.forget(id);
            println!("member {id} failed; chain is now {}", chain_text(&controller));
        }
        std::thread::sleep(period);
    }
    println!("chain {} epoch {}", chain_text(&controller), controller.config().epoch());
    Ok(())
}

fn chain_text(controller: &Controller) -> String {
    let addrs: Vec<String> = controller.config().addrs().iter().map(Addr::to_string).collect();
    addrs.join(" -> ")
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Sim => sim(&cfg, &cli.out_dir),
        Command::BenchAll => {
            for path in bench_all(&cfg.bench_settings(), &cfg.experiments, &cli.out_dir)? {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { trace } => check(trace),
        Command::Serve { index } => serve(&cfg, *index),
        Command::Ctl { action } => ctl(&cfg, action),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
