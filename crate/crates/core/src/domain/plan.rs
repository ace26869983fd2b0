//! Deployment plans: the scheduler's output, consumed by the simulator.

use serde::{Deserialize, Serialize};

use super::{DeviceId, GpuId, ModelId, PipelineId};

/// A time portion on one GPU inference stream, produced by the co-location
/// scheduler. Offsets are relative to the start of the duty cycle; the
/// portion repeats every `duty_cycle_ms`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PortionPlacement {
    pub gpu_id: GpuId,
    pub stream_index: u32,
    pub start_ms: f64,
    pub end_ms: f64,
    pub duty_cycle_ms: f64,
    /// Compute fraction occupied while the portion executes.
    pub width: f64,
}

/// One running copy of a model: where it lives and how it batches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceConfig {
    pub model_id: ModelId,
    /// Dense per-model index starting at 0; the co-location scheduler places
    /// instance k of every model before instance k+1 of any.
    pub instance_number: u32,
    pub batch_size: u32,
    pub device_id: DeviceId,
    /// GPU hosting the instance. Provisional (best-fit by free memory) until
    /// the co-location scheduler pins it along with a portion.
    pub gpu_id: GpuId,
    /// Set once the co-location scheduler has placed the instance on a
    /// stream; `None` under policies that dispatch straight off queues.
    pub placement: Option<PortionPlacement>,
}

/// An instance the co-location scheduler could not fit anywhere.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnplacedInstance {
    pub model_id: ModelId,
    pub instance_number: u32,
    pub reason: String,
}

/// The full deployment decision for one pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelinePlan {
    pub pipeline_id: PipelineId,
    /// Instances per model, sorted by `instance_number`. Every model in the
    /// pipeline has at least one entry when the plan leaves the workload
    /// distributor; the co-location stage may move entries to `unplaced`.
    pub instances: std::collections::BTreeMap<ModelId, Vec<InstanceConfig>>,
    /// Scheduler's estimate of worst-case end-to-end latency, ms.
    pub est_latency_ms: f64,
    /// Scheduler's estimate of sustainable pipeline throughput, queries/s,
    /// capped by offered load.
    pub est_throughput_qps: f64,
    /// True when the distributor could not provision enough capacity for
    /// the offered load even at its instance cap.
    pub saturated: bool,
    /// Instances dropped at the co-location stage, with reasons.
    pub unplaced: Vec<UnplacedInstance>,
}

impl PipelinePlan {
    pub fn new(pipeline_id: impl Into<PipelineId>) -> Self {
        Self {
            pipeline_id: pipeline_id.into(),
            instances: Default::default(),
            est_latency_ms: f64::INFINITY,
            est_throughput_qps: 0.0,
            saturated: false,
            unplaced: Vec::new(),
        }
    }

    /// Instances of `model`, empty slice if none.
    pub fn instances_of(&self, model: &str) -> &[InstanceConfig] {
        self.instances.get(model).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The lowest-numbered instance of `model`; the representative used for
    /// latency arithmetic (clones share its batch size by construction).
    pub fn primary(&self, model: &str) -> Option<&InstanceConfig> {
        self.instances_of(model).first()
    }

    /// Total instances across all models.
    pub fn instance_count(&self) -> usize {
        self.instances.values().map(Vec::len).sum()
    }
}
