//! Disaggregated prefill/decode serving simulator.
//!
//! A run has two passes. The execution pass pushes every request through
//! the real pipeline (prefill attention, frame encoding, transfer, frame
//! decoding, decode steps) and records operation counts, frame bytes and
//! the final decode-side KV footprint. The placement pass turns counts into
//! time with [`ComputeRates`] and replays the requests on FIFO prefill
//! instances, per-instance inbound links and memory-bounded decode
//! instances.

pub mod metrics;
pub mod sim;
pub mod transport;
pub mod workload;

pub use metrics::{
    write_request_csv, write_summary_csv, RequestMetrics, RequestStatus, RunSummary,
};
pub use sim::{
    execute_workload, run_simulation, schedule, simulate_executions, ClusterConfig, ComputeRates,
    Execution, PhaseCounters, SimReport,
};
pub use transport::{ModeledLink, SocketLink, Transport, TransportKind, DEFAULT_BANDWIDTH_BPS};
pub use workload::{
    generate_workload, load_trace, write_trace, LengthDistribution, Request, Workload,
};
