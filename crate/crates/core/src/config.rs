//! Run configuration, read from TOML and shared by the simulator, the
//! benchmarks and the real-transport nodes.
//!
//! ```toml
//! seed = 7
//! protocol = "netcraq"
//!
//! [chain]
//! nodes = 4
//! keys = 1024
//! versions = 8
//!
//! [controller]
//! heartbeat_period_us = 10000
//! detection_timeout_us = 30000
//!
//! [workload]
//! total_ops = 20000
//! write_fraction = 0.25
//! rate = 40000.0
//!
//! [failure]
//! victim = 1
//! kill_at_us = 150000
//! ```

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bench::{
    BenchSettings, ChainSpec, ExperimentPlan, FailureScenario, RetryPolicy, SearchParams,
    WorkloadSpec,
};
use crate::net::{LinkModel, ProcessingModel, SimTime, NANOS_PER_MICRO};
use crate::store::StoreConfig;
use crate::wire::ProtocolKind;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub nodes: usize,
    pub keys: u32,
    pub versions: u32,
}

impl Default for ChainSection {
    fn default() -> Self {
        let store = StoreConfig::default();
        Self {
            nodes: 4,
            keys: store.num_keys,
            versions: store.versions_per_key,
        }
    }
}

/// Failure detection, recovery pacing and client retry, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub heartbeat_period_us: u64,
    pub detection_timeout_us: u64,
    pub recovery_delay_us: u64,
    pub drain_us: u64,
    pub client_timeout_us: u64,
    pub client_attempts: u32,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            heartbeat_period_us: 10_000,
            detection_timeout_us: 30_000,
            recovery_delay_us: 50_000,
            drain_us: 5_000,
            client_timeout_us: 1_000,
            client_attempts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    /// Chain position of the node to kill.
    pub victim: usize,
    pub kill_at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub protocol: ProtocolKind,
    pub chain: ChainSection,
    pub controller: ControllerSection,
    pub link: LinkModel,
    pub processing: ProcessingModel,
    pub workload: WorkloadSpec,
    pub search: SearchParams,
    pub experiments: ExperimentPlan,
    /// Requests per reported benchmark point.
    pub ops_per_point: usize,
    pub failure: Option<FailureSection>,
    /// UDP endpoints of the chain nodes, head first, for real mode.
    pub endpoints: Vec<SocketAddr>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            protocol: ProtocolKind::Netcraq,
            chain: ChainSection::default(),
            controller: ControllerSection::default(),
            link: LinkModel::default(),
            processing: ProcessingModel::default(),
            workload: WorkloadSpec::default(),
            search: SearchParams::default(),
            experiments: ExperimentPlan::default(),
            ops_per_point: BenchSettings::default().ops_per_point,
            failure: None,
            endpoints: Vec::new(),
        }
    }
}

fn us(v: u64) -> SimTime {
    v.saturating_mul(NANOS_PER_MICRO)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.chain.nodes < 2 {
            return invalid(format!("a chain needs at least 2 nodes, got {}", self.chain.nodes));
        }
        self.store().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.workload
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let c = &self.controller;
        if c.heartbeat_period_us == 0 || c.detection_timeout_us == 0 {
            return invalid("heartbeat period and detection timeout must be positive".into());
        }
        if c.client_timeout_us == 0 || c.client_attempts == 0 {
            return invalid("client timeout and attempts must be positive".into());
        }
        if self.ops_per_point == 0 {
            return invalid("ops_per_point must be positive".into());
        }
        if let Some(f) = &self.failure {
            if f.victim >= self.chain.nodes {
                return invalid(format!("failure victim {} outside the chain", f.victim));
            }
        }
        if !self.endpoints.is_empty() && self.endpoints.len() != self.chain.nodes {
            return invalid(format!(
                "{} endpoints listed for {} nodes",
                self.endpoints.len(),
                self.chain.nodes
            ));
        }
        Ok(())
    }

    pub fn store(&self) -> Result<StoreConfig, crate::store::StoreError> {
        StoreConfig::new(self.chain.keys, self.chain.versions)
    }

    pub fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            protocol: self.protocol,
            chain_length: self.chain.nodes,
            store: self.store().unwrap_or_default(),
            link: self.link,
            processing: self.processing,
            seed: self.seed,
        }
    }

    /// The workload with the run seed applied.
    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            seed: self.seed,
            ..self.workload.clone()
        }
    }

    pub fn bench_settings(&self) -> BenchSettings {
        BenchSettings {
            store: self.store().unwrap_or_default(),
            link: self.link,
            processing: self.processing,
            seed: self.seed,
            clients: self.workload.clients,
            keys: self.workload.keys,
            arrivals: self.workload.arrivals,
            ops_per_point: self.ops_per_point,
            search: self.search,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            timeout_ns: us(self.controller.client_timeout_us),
            max_attempts: self.controller.client_attempts,
        }
    }

    /// Client timeout for real-mode requests.
    pub fn client_timeout(&self) -> Duration {
        Duration::from_micros(self.controller.client_timeout_us)
    }

    /// The failure experiment, when the config has a `[failure]` section.
    pub fn failure_scenario(&self) -> Option<FailureScenario> {
        let f = self.failure.as_ref()?;
        let c = &self.controller;
        Some(FailureScenario {
            chain: self.chain_spec(),
            workload: self.workload_spec(),
            victim: f.victim,
            kill_at: us(f.kill_at_us),
            heartbeat_period: us(c.heartbeat_period_us),
            detection_timeout: us(c.detection_timeout_us),
            recovery_delay: us(c.recovery_delay_us),
            drain: us(c.drain_us),
            retry: self.retry_policy(),
        })
    }
}
