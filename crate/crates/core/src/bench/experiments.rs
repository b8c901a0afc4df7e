use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::harness::{run_requests, ChainSpec, RunSummary};
use super::metrics::{emit_csv, MetricsRow};
use super::workload::{generate, Arrivals, KeyDistribution, Request, Target, WorkloadSpec};
use super::BenchError;
use crate::net::{LinkModel, ProcessingModel, SimTime};
use crate::store::StoreConfig;
use crate::verify::OpKind;
use crate::wire::ProtocolKind;

pub const PROTOCOLS: [ProtocolKind; 2] = [ProtocolKind::Netcraq, ProtocolKind::Baseline];

/// Geometric bisection bounds for the max-rate search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub min_rate: f64,
    pub max_rate: f64,
    pub iterations: u32,
    /// Requests per probe run.
    pub trial_ops: usize,
    /// Completed rate must reach this fraction of the offered rate.
    pub min_completion: f64,
    /// p99 latency bound as a multiple of the unloaded latency.
    pub latency_factor: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            min_rate: 1_000.0,
            max_rate: 2_000_000.0,
            iterations: 14,
            trial_ops: 4_000,
            min_completion: 0.99,
            latency_factor: 10.0,
        }
    }
}

/// Settings shared by every experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub store: StoreConfig,
    pub link: LinkModel,
    pub processing: ProcessingModel,
    pub seed: u64,
    pub clients: u32,
    pub keys: KeyDistribution,
    pub arrivals: Arrivals,
    /// Requests in each reported run.
    pub ops_per_point: usize,
    pub search: SearchParams,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            store: StoreConfig::default(),
            link: LinkModel::default(),
            processing: ProcessingModel::default(),
            seed: 1,
            clients: 16,
            keys: KeyDistribution::Uniform,
            arrivals: Arrivals::Deterministic,
            ops_per_point: 20_000,
            search: SearchParams::default(),
        }
    }
}

impl BenchSettings {
    pub fn chain(&self, protocol: ProtocolKind, chain_length: usize) -> ChainSpec {
        ChainSpec {
            protocol,
            chain_length,
            store: self.store,
            link: self.link,
            processing: self.processing,
            seed: self.seed,
        }
    }

    pub fn workload(&self, write_fraction: f64, target: Target, rate: f64, ops: usize) -> WorkloadSpec {
        WorkloadSpec {
            total_ops: ops,
            write_fraction,
            keys: self.keys,
            rate,
            arrivals: self.arrivals,
            target,
            clients: self.clients,
            seed: self.seed,
        }
    }
}

/// A reported row together with the run behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub row: MetricsRow,
    pub summary: RunSummary,
    /// Latency of a single request on an idle chain.
    pub unloaded_latency_ns: SimTime,
}

pub fn rows(points: &[Measured]) -> Vec<MetricsRow> {
    points.iter().map(|m| m.row.clone()).collect()
}

/// Latency of one request of `kind` sent to `position` on an idle chain.
pub fn unloaded_latency(spec: &ChainSpec, kind: OpKind, position: usize) -> Result<SimTime, BenchError> {
    let req = Request {
        at: 0,
        client: 0,
        kind,
        key: 0,
        position,
    };
    let (s, _) = run_requests(spec, vec![req], 1.0, false)?;
    if s.completed != 1 {
        return Err(BenchError::Workload(format!("{kind:?} at position {position} never completed")));
    }
    Ok(s.p99_latency_ns)
}

/// Reference latency for a workload: the slowest single request it can issue.
fn reference_latency(spec: &ChainSpec, workload: &WorkloadSpec) -> Result<SimTime, BenchError> {
    let mut worst = 0;
    if workload.write_fraction < 1.0 {
        let positions: Vec<usize> = match workload.target {
            Target::Fixed(p) => vec![p.min(spec.chain_length - 1)],
            Target::RoundRobin => (0..spec.chain_length).collect(),
        };
        for p in positions {
            worst = worst.max(unloaded_latency(spec, OpKind::Read, p)?);
        }
    }
    if workload.write_fraction > 0.0 {
        worst = worst.max(unloaded_latency(spec, OpKind::Write, 0)?);
    }
    Ok(worst)
}

fn run_workload(spec: &ChainSpec, workload: &WorkloadSpec) -> Result<RunSummary, BenchError> {
    let reqs = generate(workload, spec.chain_length, spec.store.num_keys)?;
    Ok(run_requests(spec, reqs, workload.rate, false)?.0)
}

/// Highest offered rate at which the chain keeps up: the completed rate
/// stays within `min_completion` of the offered rate and p99 latency within
/// `latency_factor` of the unloaded latency. Returns the rate and the
/// reference latency.
pub fn max_attainable_rate(
    spec: &ChainSpec,
    workload: &WorkloadSpec,
    search: &SearchParams,
) -> Result<(f64, SimTime), BenchError> {
    let reference = reference_latency(spec, workload)?;
    let ok = |rate: f64| -> Result<bool, BenchError> {
        let w = WorkloadSpec {
            rate,
            total_ops: search.trial_ops,
            ..workload.clone()
        };
        let s = run_workload(spec, &w)?;
        Ok(s.completed_qps >= search.min_completion * rate
            && s.p99_latency_ns as f64 <= search.latency_factor * reference as f64)
    };
    let (mut lo, mut hi) = (search.min_rate, search.max_rate);
    if !ok(lo)? {
        return Err(BenchError::Workload(format!(
            "chain cannot sustain even {lo} queries/s"
        )));
    }
    if ok(hi)? {
        return Ok((hi, reference));
    }
    for _ in 0..search.iterations {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo.round(), reference))
}

fn measure_at_max(
    settings: &BenchSettings,
    spec: &ChainSpec,
    write_fraction: f64,
    target: Target,
) -> Result<(RunSummary, SimTime), BenchError> {
    let probe = settings.workload(write_fraction, target, settings.search.min_rate, settings.ops_per_point);
    let (rate, reference) = max_attainable_rate(spec, &probe, &settings.search)?;
    let workload = WorkloadSpec { rate, ..probe };
    Ok((run_workload(spec, &workload)?, reference))
}

/// Max read rate per injection point, both protocols.
pub fn run_distance_sweep(settings: &BenchSettings, chain_length: usize) -> Result<Vec<Measured>, BenchError> {
    let mut out = Vec::new();
    for protocol in PROTOCOLS {
        let spec = settings.chain(protocol, chain_length);
        for distance in 0..chain_length {
            let position = chain_length - 1 - distance;
            let (summary, reference) = measure_at_max(settings, &spec, 0.0, Target::Fixed(position))?;
            out.push(Measured {
                row: summary.to_row("distance", protocol, chain_length, Some(distance)),
                summary,
                unloaded_latency_ns: reference,
            });
        }
    }
    Ok(out)
}

/// Latency at each offered rate with reads spread over every node.
pub fn run_latency_sweep(
    settings: &BenchSettings,
    chain_length: usize,
    rates: &[f64],
) -> Result<Vec<Measured>, BenchError> {
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Workload("rates must be strictly ascending".into()));
    }
    let mut out = Vec::new();
    for protocol in PROTOCOLS {
        let spec = settings.chain(protocol, chain_length);
        let reference = reference_latency(&spec, &settings.workload(0.0, Target::RoundRobin, 1.0, 1))?;
        for &rate in rates {
            let w = settings.workload(0.0, Target::RoundRobin, rate, settings.ops_per_point);
            let summary = run_workload(&spec, &w)?;
            out.push(Measured {
                row: summary.to_row("latency", protocol, chain_length, None),
                summary,
                unloaded_latency_ns: reference,
            });
        }
    }
    Ok(out)
}

/// Experiment id used for a mixed-workload row.
pub fn mixed_experiment_id(write_fraction: f64) -> String {
    format!("mixed-w{:.2}", write_fraction)
}

/// Max rate for each write fraction, all requests entering at the head.
pub fn run_mixed_workload(
    settings: &BenchSettings,
    chain_length: usize,
    write_fractions: &[f64],
) -> Result<Vec<Measured>, BenchError> {
    if let Some(f) = write_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(BenchError::Workload(format!("write fraction {f} outside [0, 1]")));
    }
    let mut out = Vec::new();
    for protocol in PROTOCOLS {
        let spec = settings.chain(protocol, chain_length);
        for &wf in write_fractions {
            let (summary, reference) = measure_at_max(settings, &spec, wf, Target::Fixed(0))?;
            out.push(Measured {
                row: summary.to_row(&mixed_experiment_id(wf), protocol, chain_length, Some(chain_length - 1)),
                summary,
                unloaded_latency_ns: reference,
            });
        }
    }
    Ok(out)
}

/// Max read rate at the head for each chain length.
pub fn run_chain_scaling(settings: &BenchSettings, lengths: &[usize]) -> Result<Vec<Measured>, BenchError> {
    let mut out = Vec::new();
    for protocol in PROTOCOLS {
        for &n in lengths {
            let spec = settings.chain(protocol, n);
            let (summary, reference) = measure_at_max(settings, &spec, 0.0, Target::Fixed(0))?;
            out.push(Measured {
                row: summary.to_row("scaling", protocol, n, Some(n - 1)),
                summary,
                unloaded_latency_ns: reference,
            });
        }
    }
    Ok(out)
}

/// Parameters of the four standard experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub chain_length: usize,
    pub latency_rates: Vec<f64>,
    pub write_fractions: Vec<f64>,
    pub scaling_lengths: Vec<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            chain_length: 4,
            latency_rates: vec![5_000.0, 10_000.0, 20_000.0, 40_000.0, 80_000.0, 160_000.0],
            write_fractions: vec![0.0, 0.25, 0.5, 0.75],
            scaling_lengths: (4..=8).collect(),
        }
    }
}

/// Runs all four experiments and writes one CSV per experiment into
/// `out_dir`. Returns the written paths.
pub fn bench_all(
    settings: &BenchSettings,
    plan: &ExperimentPlan,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, BenchError> {
    std::fs::create_dir_all(out_dir).map_err(|e| BenchError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let n = plan.chain_length;
    let results = [
        ("distance.csv", run_distance_sweep(settings, n)?),
        ("latency.csv", run_latency_sweep(settings, n, &plan.latency_rates)?),
        ("mixed.csv", run_mixed_workload(settings, n, &plan.write_fractions)?),
        ("scaling.csv", run_chain_scaling(settings, &plan.scaling_lengths)?),
    ];
    let mut paths = Vec::new();
    for (name, points) in results {
        let path = out_dir.join(name);
        emit_csv(&rows(&points), &path)?;
        paths.push(path);
    }
    Ok(paths)
}
