use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::net::{SimTime, NANOS_PER_SEC};
use crate::verify::OpKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KeyDistribution {
    #[default]
    Uniform,
    Zipf { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrivals {
    /// Evenly spaced requests.
    #[default]
    Deterministic,
    /// Exponential inter-arrival times.
    Poisson,
}

/// Where reads are sent. Writes always enter at the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "position")]
pub enum Target {
    /// Chain position (0 is the head).
    Fixed(usize),
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub total_ops: usize,
    pub write_fraction: f64,
    pub keys: KeyDistribution,
    /// Offered load in queries per simulated second.
    pub rate: f64,
    pub arrivals: Arrivals,
    pub target: Target,
    pub clients: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            total_ops: 10_000,
            write_fraction: 0.0,
            keys: KeyDistribution::Uniform,
            rate: 50_000.0,
            arrivals: Arrivals::Deterministic,
            target: Target::RoundRobin,
            clients: 16,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err(BenchError::Workload(format!(
                "write fraction {} outside [0, 1]",
                self.write_fraction
            )));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(BenchError::Workload(format!("rate {} must be positive", self.rate)));
        }
        if self.clients == 0 {
            return Err(BenchError::Workload("at least one client is needed".into()));
        }
        if let KeyDistribution::Zipf { exponent } = self.keys {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(BenchError::Workload(format!("zipf exponent {exponent} must be positive")));
            }
        }
        Ok(())
    }

    /// Time the whole workload takes to offer, in nanoseconds.
    pub fn offered_span_ns(&self) -> f64 {
        self.total_ops as f64 / self.rate * NANOS_PER_SEC as f64
    }
}

/// One client operation before it is issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub at: SimTime,
    /// Client index, `0..clients`.
    pub client: u32,
    pub kind: OpKind,
    pub key: u32,
    /// Chain position a read is sent to.
    pub position: usize,
}

/// Expands `spec` into a time-ordered request list for a chain of
/// `chain_length` nodes holding `num_keys` keys.
pub fn generate(spec: &WorkloadSpec, chain_length: usize, num_keys: u32) -> Result<Vec<Request>, BenchError> {
    spec.validate()?;
    if chain_length == 0 || num_keys == 0 {
        return Err(BenchError::Workload("empty chain or key space".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = NANOS_PER_SEC as f64 / spec.rate;
    let exp = Exp::new(1.0 / gap).map_err(|e| BenchError::Workload(e.to_string()))?;
    let zipf = match spec.keys {
        KeyDistribution::Zipf { exponent } => {
            Some(Zipf::new(num_keys as u64, exponent).map_err(|e| BenchError::Workload(e.to_string()))?)
        }
        KeyDistribution::Uniform => None,
    };

    let mut out = Vec::with_capacity(spec.total_ops);
    let mut t = 0.0f64;
    for i in 0..spec.total_ops {
        let kind = if rng.gen_bool(spec.write_fraction) {
            OpKind::Write
        } else {
            OpKind::Read
        };
        let key = match &zipf {
            Some(z) => (z.sample(&mut rng) as u32).clamp(1, num_keys) - 1,
            None => rng.gen_range(0..num_keys),
        };
        let position = match (kind, spec.target) {
            (OpKind::Write, _) => 0,
            (OpKind::Read, Target::Fixed(p)) => p.min(chain_length - 1),
            (OpKind::Read, Target::RoundRobin) => i % chain_length,
        };
        out.push(Request {
            at: t.round() as SimTime,
            client: (i % spec.clients as usize) as u32,
            kind,
            key,
            position,
        });
        t += match spec.arrivals {
            Arrivals::Deterministic => gap,
            Arrivals::Poisson => exp.sample(&mut rng),
        };
    }
    Ok(out)
}
