//! Trace-driven scheduling and simulation for edge video-analytics inference
//! serving.
//!
//! The library models a small cluster (one GPU server plus a set of edge
//! devices) running DAG-shaped vision pipelines, and provides:
//!
//! * a cross-device workload distributor that picks per-model placement,
//!   batch size, and instance count from recent arrival statistics
//!   ([`cwd`]);
//! * a co-location scheduler that lays instances out as time portions on
//!   per-GPU inference streams so that co-located models do not contend
//!   ([`coral`]);
//! * a horizontal autoscaler that clones or retires instances between
//!   scheduling rounds ([`autoscaler`]);
//! * a deterministic discrete-event simulator that replays arrival and
//!   bandwidth traces against a scheduling policy and reports effective
//!   throughput, latency, and memory ([`simengine`]);
//! * baseline policies for ablation studies ([`policies`]);
//! * TOML scenario files binding clusters, pipelines, profiles, and traces
//!   into reproducible experiments ([`scenario`]).
//!
//! Everything is deterministic: all randomness flows from explicit seeds,
//! all maps iterate in key order, and a run with the same scenario, policy,
//! and seed produces a byte-identical report.

pub mod autoscaler;
pub mod coral;
pub mod cwd;
pub mod domain;
pub mod policies;
pub mod scenario;
pub mod simengine;
pub mod traces;
