//! Latency arithmetic: the per-query cost model everything else prices
//! decisions with.
//!
//! One query processed by a model in a batch of `bz` costs
//! `batch_latency / bz` of amortized compute plus the time to move its
//! input over whatever path feeds the model. Worst-case end-to-end latency
//! for a pipeline charges every stage its full batch: the unluckiest query
//! arrives first in each batch and waits for the whole batch everywhere.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{
    ClusterSpec, DeviceId, ModelId, ModelProfile, PipelinePlan, PipelineSpec, ProfileSet,
};

/// How a model's input reaches it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkPath {
    /// Upstream output is already on the model's device; only the loopback
    /// hop is charged.
    SameDevice { intra_bw_bytes_per_sec: f64 },
    /// Input crosses the network at the given bandwidth.
    CrossDevice { bw_bytes_per_sec: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("model {model_id} has no profile entry for class {device_class} batch {batch_size}")]
    MissingEntry {
        model_id: String,
        device_class: String,
        batch_size: u32,
    },
    #[error("link between {from} and {to} is down (zero bandwidth)")]
    LinkDown { from: String, to: String },
    #[error("no bandwidth trace covers the link between {from} and {to}")]
    UnknownLink { from: String, to: String },
    #[error("model {model_id} not in plan")]
    ModelNotInPlan { model_id: String },
}

/// Average per-query latency of one model at a batch size: amortized batch
/// execution plus input movement.
pub fn avg_query_latency(
    profile: &ModelProfile,
    batch_size: u32,
    path: LinkPath,
    device_class: &str,
) -> Result<f64, LatencyError> {
    let batch_ms = profile.latency_ms(device_class, batch_size).ok_or_else(|| {
        LatencyError::MissingEntry {
            model_id: profile.model_id.clone(),
            device_class: device_class.to_string(),
            batch_size,
        }
    })?;
    let bw = match path {
        LinkPath::SameDevice { intra_bw_bytes_per_sec } => intra_bw_bytes_per_sec,
        LinkPath::CrossDevice { bw_bytes_per_sec } => bw_bytes_per_sec,
    };
    if bw <= 0.0 {
        return Err(LatencyError::LinkDown {
            from: "upstream".into(),
            to: profile.model_id.clone(),
        });
    }
    let io_ms = profile.in_bytes / bw * 1000.0;
    Ok(batch_ms / batch_size as f64 + io_ms)
}

/// Point-in-time bandwidth of every cross-device link, bytes/s. Links are
/// undirected; keys are stored with endpoints sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandwidthSnapshot {
    links: BTreeMap<(DeviceId, DeviceId), f64>,
}

fn link_key(a: &str, b: &str) -> (DeviceId, DeviceId) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl BandwidthSnapshot {
    pub fn set(&mut self, a: &str, b: &str, bytes_per_sec: f64) {
        self.links.insert(link_key(a, b), bytes_per_sec);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.links.get(&link_key(a, b)).copied()
    }

    pub fn links(&self) -> impl Iterator<Item = (&(DeviceId, DeviceId), f64)> {
        self.links.iter().map(|(k, v)| (k, *v))
    }
}

/// Per-model working view used when pricing candidate configurations that
/// have not been materialized into a [`PipelinePlan`] yet.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssign {
    pub device_id: DeviceId,
    pub batch_size: u32,
}

fn path_between(
    upstream_device: &str,
    device: &str,
    cluster: &ClusterSpec,
    bandwidth: &BandwidthSnapshot,
) -> Result<LinkPath, LatencyError> {
    if upstream_device == device {
        let intra = cluster
            .device(device)
            .map(|d| d.intra_bw_bytes_per_sec)
            .unwrap_or(f64::INFINITY);
        Ok(LinkPath::SameDevice { intra_bw_bytes_per_sec: intra })
    } else {
        match bandwidth.get(upstream_device, device) {
            None => Err(LatencyError::UnknownLink {
                from: upstream_device.to_string(),
                to: device.to_string(),
            }),
            Some(bw) if bw <= 0.0 => Err(LatencyError::LinkDown {
                from: upstream_device.to_string(),
                to: device.to_string(),
            }),
            Some(bw) => Ok(LinkPath::CrossDevice { bw_bytes_per_sec: bw }),
        }
    }
}

/// Worst-case end-to-end latency of a pipeline under a per-model assignment:
/// every stage charges its full batch-worth of amortized latency, so a query
/// that lands first in every batch still meets this bound.
pub fn pipeline_worst_case_ms(
    pipeline: &PipelineSpec,
    assign: &BTreeMap<ModelId, ModelAssign>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<f64, LatencyError> {
    let mut total = 0.0;
    for model in pipeline.topo_order() {
        let cfg = assign.get(&model).ok_or_else(|| LatencyError::ModelNotInPlan {
            model_id: model.clone(),
        })?;
        let profile = profiles.get(&model).ok_or_else(|| LatencyError::MissingEntry {
            model_id: model.clone(),
            device_class: "<unprofiled>".into(),
            batch_size: cfg.batch_size,
        })?;
        let upstream_device = match pipeline.parent(&model) {
            Some(parent) => {
                let p = assign.get(parent).ok_or_else(|| LatencyError::ModelNotInPlan {
                    model_id: parent.clone(),
                })?;
                p.device_id.clone()
            }
            None => pipeline.source_device.clone(),
        };
        let class = cluster
            .device(&cfg.device_id)
            .map(|d| d.device_class.clone())
            .unwrap_or_default();
        let path = path_between(&upstream_device, &cfg.device_id, cluster, bandwidth)?;
        let per_query = avg_query_latency(profile, cfg.batch_size, path, &class)?;
        total += per_query * cfg.batch_size as f64;
    }
    Ok(total)
}

/// Worst-case latency of a materialized plan. Each model is priced at its
/// lowest-numbered instance; autoscaler clones share that batch size.
pub fn worst_case_pipeline_latency(
    plan: &PipelinePlan,
    pipeline: &PipelineSpec,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<f64, LatencyError> {
    let mut assign = BTreeMap::new();
    for model in &pipeline.models {
        let cfg = plan.primary(model).ok_or_else(|| LatencyError::ModelNotInPlan {
            model_id: model.clone(),
        })?;
        assign.insert(
            model.clone(),
            ModelAssign {
                device_id: cfg.device_id.clone(),
                batch_size: cfg.batch_size,
            },
        );
    }
    pipeline_worst_case_ms(pipeline, &assign, cluster, profiles, bandwidth)
}

/// Queries per second a pipeline can complete within the given end-to-end
/// latency. Zero for non-positive or unbounded latency.
pub fn goodput_qps(latency_ms: f64) -> f64 {
    if latency_ms.is_finite() && latency_ms > 0.0 {
        1000.0 / latency_ms
    } else {
        0.0
    }
}

/// Goodput of one plan, priced from its estimated worst-case latency.
pub fn pipeline_goodput(plan: &PipelinePlan) -> f64 {
    goodput_qps(plan.est_latency_ms)
}

/// The system objective: summed goodput across pipelines. Maximizing this
/// favors plans that keep every pipeline's worst-case latency low.
pub fn system_goodput(plans: &[PipelinePlan]) -> f64 {
    plans.iter().map(pipeline_goodput).sum()
}
