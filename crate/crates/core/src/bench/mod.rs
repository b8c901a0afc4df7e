//! Workload generation, experiment drivers and CSV output.

mod experiments;
pub mod failure;
mod harness;
mod metrics;
mod workload;

pub use experiments::{
    bench_all, max_attainable_rate, mixed_experiment_id, rows, run_chain_scaling,
    run_distance_sweep, run_latency_sweep, run_mixed_workload, unloaded_latency, BenchSettings,
    ExperimentPlan, Measured, SearchParams, PROTOCOLS,
};
pub use failure::{run_failure_scenario, FailureReport, FailureScenario};
pub use harness::{
    run_requests, ChainSpec, Cluster, Driver, NodeTotals, RetryPolicy, RunSummary, CLIENT_BASE,
};
pub use metrics::{emit_csv, percentile, read_csv, write_csv, MetricsRow, CSV_COLUMNS};
pub use workload::{generate, Arrivals, KeyDistribution, Request, Target, WorkloadSpec};

use crate::controller::ControllerError;
use crate::net::NetError;
use crate::node::NodeError;
use crate::verify::HistoryError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Workload(String),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Node(#[from] NodeError),

    #[error(transparent)]
    Controller(#[from] ControllerError),

    #[error(transparent)]
    History(#[from] HistoryError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
