//! Run metrics: latency summaries, per-pipeline breakdowns, the final
//! report, and one-second telemetry rows.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::PipelineId;

/// Percentile summary over completed-query latencies.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile on a sorted slice (p in [0, 100]).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    /// Consumes raw samples (any order).
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        Self {
            samples: samples.len() as u64,
            mean_ms: samples.iter().sum::<f64>() / n,
            p50_ms: percentile(&samples, 50.0),
            p95_ms: percentile(&samples, 95.0),
            p99_ms: percentile(&samples, 99.0),
            max_ms: *samples.last().unwrap(),
        }
    }
}

/// Counters for one pipeline (or the whole run).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlowCounters {
    /// Queries born at the pipeline source.
    pub source_arrivals: u64,
    /// Units finishing their final stage, regardless of deadline.
    pub completions: u64,
    /// Completions within their SLO deadline.
    pub effective_completions: u64,
    /// Completions past their deadline.
    pub late_completions: u64,
    /// Units discarded at dispatch because their deadline had passed.
    pub dropped_units: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineReport {
    pub counters: FlowCounters,
    pub latency: LatencySummary,
    pub effective_throughput_qps: f64,
    pub total_throughput_qps: f64,
}

/// The final report for one simulated policy run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub seed: u64,
    pub duration_ms: f64,
    pub totals: FlowCounters,
    /// Units still queued, executing, or in transfer at the end.
    pub in_flight_units: u64,
    pub effective_throughput_qps: f64,
    pub total_throughput_qps: f64,
    /// Effective / total completions (1.0 when nothing finished late).
    pub goodput_ratio: f64,
    pub latency: LatencySummary,
    pub per_pipeline: BTreeMap<PipelineId, PipelineReport>,
    /// Peak resident + executing memory per GPU ("device/gpu" keys).
    pub peak_gpu_mem_mib: BTreeMap<String, f64>,
    /// Peak of the sum across GPUs.
    pub peak_total_mem_mib: f64,
    /// Batches whose execution was stretched by utilization contention.
    pub inflated_batches: u64,
    pub total_batches: u64,
    pub scheduler_rounds: u32,
    pub scale_ups: u32,
    pub scale_downs: u32,
    /// Units dropped per "pipeline/model" stage.
    pub dropped_by_stage: BTreeMap<String, u64>,
}

/// One telemetry bucket (defaults to one second wide).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeseriesRow {
    /// Bucket end, milliseconds since simulation start.
    pub time_ms: f64,
    /// Within-SLO completions per second in this bucket.
    pub effective_tput: f64,
    /// All completions per second in this bucket.
    pub total_tput: f64,
    /// Units dropped in this bucket.
    pub dropped: u64,
    /// 99th percentile completion latency within the bucket (0 if none).
    pub p99_ms: f64,
    /// Resident + executing memory across all GPUs at bucket close.
    pub mem_mib: f64,
    /// Total units sitting in model queues at bucket close.
    pub queued_units: u64,
}
