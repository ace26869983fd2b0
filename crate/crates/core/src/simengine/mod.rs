//! Deterministic discrete-event simulation of scheduled pipelines:
//! arrivals, transfers, batched execution, contention, drops, scheduler
//! rounds, and runtime scaling — plus the metrics that come out.

mod engine;
pub mod event;
pub mod metrics;

pub use engine::{run_simulation, SimConfig, SimInputs, SimOutput};
pub use event::{EventKind, EventQueue, Unit};
pub use metrics::{
    percentile, FlowCounters, LatencySummary, PipelineReport, SimReport, TimeseriesRow,
};
