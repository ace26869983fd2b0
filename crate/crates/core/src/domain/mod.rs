//! Core data model shared by the schedulers and the simulator: device and
//! model profiles, cluster topology, pipeline DAGs, deployment plans, and
//! the latency/constraint arithmetic that everything else is built on.

pub mod cluster;
pub mod latency;
pub mod pipeline;
pub mod plan;
pub mod profile;
pub mod validate;

pub use cluster::{ClusterSpec, DeviceSpec, GpuKey, GpuSpec};
pub use latency::{
    avg_query_latency, goodput_qps, pipeline_goodput, pipeline_worst_case_ms, system_goodput,
    worst_case_pipeline_latency, BandwidthSnapshot, LatencyError, LinkPath, ModelAssign,
};
pub use pipeline::{PipelineError, PipelineSpec};
pub use plan::{InstanceConfig, PipelinePlan, PortionPlacement, UnplacedInstance};
pub use profile::{load_profiles, ModelProfile, ProfileError, ProfileSet};
pub use validate::{validate_plan, Violation};

/// Model identifier, unique within a [`ProfileSet`]. Pipelines reference
/// models by this id; two pipelines may share a model id (same weights,
/// separate queues and instances).
pub type ModelId = String;

/// Device identifier, unique within a cluster.
pub type DeviceId = String;

/// GPU identifier, unique within its device.
pub type GpuId = String;

/// Pipeline identifier, unique within a scenario.
pub type PipelineId = String;

/// Hardware class a device belongs to (e.g. `"server_gpu"`, `"agx"`).
/// Profile tables are keyed by class, so all devices of one class share
/// batch-latency and utilization numbers.
pub type DeviceClass = String;
