//! Deployment-plan constraint checking: the three feasibility rules every
//! accepted plan must satisfy.
//!
//! 1. **Deadline** — each pipeline's worst-case end-to-end latency fits its
//!    SLO.
//! 2. **Memory** — per GPU, resident weights plus the worst concurrent
//!    intermediate footprint fit capacity. Instances that share a stream
//!    time-share the GPU, so a stream contributes only its largest
//!    intermediate; instances without a portion (queue-driven policies, or
//!    plans not yet through the co-location stage) are each counted in
//!    full, the honest concurrent worst case.
//! 3. **Utilization** — per GPU, summing each stream's widest portion stays
//!    within `max_util`. Only placed instances hold compute reservations;
//!    queue-driven deployments contend at runtime instead, which the
//!    simulator's interference model charges them for.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    worst_case_pipeline_latency, BandwidthSnapshot, ClusterSpec, GpuKey, PipelinePlan,
    PipelineSpec, ProfileSet,
};

/// One constraint violation, with enough numbers to see the margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Worst-case latency exceeds the pipeline SLO.
    Slo {
        pipeline_id: String,
        latency_ms: f64,
        slo_ms: f64,
    },
    /// Latency could not even be computed (dead or missing link, missing
    /// profile entry): the plan is infeasible as deployed.
    Infeasible { pipeline_id: String, detail: String },
    /// A GPU's weights + concurrent intermediates exceed capacity.
    Memory {
        gpu: String,
        used_mib: f64,
        capacity_mib: f64,
    },
    /// A GPU's reserved concurrent utilization exceeds its maximum.
    Utilization { gpu: String, used: f64, max_util: f64 },
    /// The plan references hardware or profile entries that do not exist.
    Malformed { detail: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Slo { pipeline_id, latency_ms, slo_ms } => write!(
                f,
                "pipeline {pipeline_id}: worst-case latency {latency_ms:.3} ms exceeds SLO {slo_ms:.3} ms"
            ),
            Violation::Infeasible { pipeline_id, detail } => {
                write!(f, "pipeline {pipeline_id}: infeasible: {detail}")
            }
            Violation::Memory { gpu, used_mib, capacity_mib } => write!(
                f,
                "gpu {gpu}: memory {used_mib:.1} MiB exceeds capacity {capacity_mib:.1} MiB"
            ),
            Violation::Utilization { gpu, used, max_util } => write!(
                f,
                "gpu {gpu}: utilization {used:.3} exceeds max {max_util:.3}"
            ),
            Violation::Malformed { detail } => write!(f, "malformed plan: {detail}"),
        }
    }
}

const EPS: f64 = 1e-9;

/// Checks a full system plan (all pipelines, shared hardware) against the
/// deadline, memory, and utilization rules. Returns every violation found,
/// in deterministic order: SLO issues in pipeline order, then per-GPU
/// memory, then per-GPU utilization.
pub fn validate_plan(
    plans: &[PipelinePlan],
    pipelines: &[PipelineSpec],
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Vec<Violation> {
    let mut violations = Vec::new();

    let by_id: BTreeMap<&str, &PipelineSpec> =
        pipelines.iter().map(|p| (p.pipeline_id.as_str(), p)).collect();

    for plan in plans {
        let Some(pipeline) = by_id.get(plan.pipeline_id.as_str()) else {
            violations.push(Violation::Malformed {
                detail: format!("plan references unknown pipeline {}", plan.pipeline_id),
            });
            continue;
        };
        match worst_case_pipeline_latency(plan, pipeline, cluster, profiles, bandwidth) {
            Ok(latency_ms) => {
                if latency_ms > pipeline.slo_ms + EPS {
                    violations.push(Violation::Slo {
                        pipeline_id: plan.pipeline_id.clone(),
                        latency_ms,
                        slo_ms: pipeline.slo_ms,
                    });
                }
            }
            Err(e) => violations.push(Violation::Infeasible {
                pipeline_id: plan.pipeline_id.clone(),
                detail: e.to_string(),
            }),
        }
    }

    // Per-GPU tallies across all pipelines.
    #[derive(Default)]
    struct Tally {
        weight_mib: f64,
        /// Largest intermediate per stream; placed instances only.
        stream_intermediate: BTreeMap<u32, f64>,
        /// Widest portion per stream; placed instances only.
        stream_util: BTreeMap<u32, f64>,
        /// Intermediates of instances with no portion, charged in full.
        loose_intermediate: f64,
    }
    let mut tallies: BTreeMap<GpuKey, Tally> = BTreeMap::new();

    for plan in plans {
        for (model, instances) in &plan.instances {
            let Some(profile) = profiles.get(model) else {
                violations.push(Violation::Malformed {
                    detail: format!("no profile for model {model}"),
                });
                continue;
            };
            for cfg in instances {
                let key = GpuKey::new(cfg.device_id.clone(), cfg.gpu_id.clone());
                if cluster.gpu(&key).is_none() {
                    violations.push(Violation::Malformed {
                        detail: format!("instance {model}#{} on unknown gpu {key}", cfg.instance_number),
                    });
                    continue;
                }
                let Some(intermediate) = profile.intermediate_mib(cfg.batch_size) else {
                    violations.push(Violation::Malformed {
                        detail: format!(
                            "model {model} has no intermediate footprint for batch {}",
                            cfg.batch_size
                        ),
                    });
                    continue;
                };
                let tally = tallies.entry(key).or_default();
                tally.weight_mib += profile.weight_mib;
                match &cfg.placement {
                    Some(p) => {
                        let imax = tally.stream_intermediate.entry(p.stream_index).or_insert(0.0);
                        *imax = imax.max(intermediate);
                        let umax = tally.stream_util.entry(p.stream_index).or_insert(0.0);
                        *umax = umax.max(p.width);
                    }
                    None => tally.loose_intermediate += intermediate,
                }
            }
        }
    }

    for (key, tally) in &tallies {
        let gpu = cluster.gpu(key).expect("unknown GPUs filtered above");
        let used_mib = tally.weight_mib
            + tally.stream_intermediate.values().sum::<f64>()
            + tally.loose_intermediate;
        if used_mib > gpu.mem_capacity_mib + EPS {
            violations.push(Violation::Memory {
                gpu: key.to_string(),
                used_mib,
                capacity_mib: gpu.mem_capacity_mib,
            });
        }
    }
    for (key, tally) in &tallies {
        let gpu = cluster.gpu(key).expect("unknown GPUs filtered above");
        let used: f64 = tally.stream_util.values().sum();
        if used > gpu.max_util + EPS {
            violations.push(Violation::Utilization {
                gpu: key.to_string(),
                used,
                max_util: gpu.max_util,
            });
        }
    }

    violations
}
