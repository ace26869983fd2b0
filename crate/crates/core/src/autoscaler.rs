//! Horizontal autoscaling between scheduler rounds: reacting to workload
//! shifts faster than the periodic re-plan by adding or retiring single
//! model instances.
//!
//! Every tick the scaler compares each model's observed arrival rate with
//! its fleet's provisioned capacity. A rate above the surge band adds one
//! instance — on the model's home device if a stream portion is free, else
//! spilling to the server. A rate the fleet would still comfortably absorb
//! with one fewer instance retires the highest-numbered copy, returning
//! its portion (and memory) to the free pool. A per-model cooldown stops
//! the scaler from thrashing on noisy windows.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::coral::{instance_need, CoralState, InstanceKey};
use crate::domain::{
    BandwidthSnapshot, ClusterSpec, InstanceConfig, ModelId, PipelineId, PipelinePlan,
    PipelineSpec, PortionPlacement, ProfileSet,
};

const EPS: f64 = 1e-9;

/// Thresholds and pacing for the runtime scaler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalerConfig {
    /// Scale up when observed rate exceeds capacity by this fraction.
    pub surge_threshold: f64,
    /// Scale down only if the shrunken fleet would still carry the
    /// observed rate with this much headroom to spare.
    pub dip_threshold: f64,
    /// Minimum time between actions on the same model.
    pub cooldown_ms: f64,
    /// How often the scaler runs.
    pub tick_ms: f64,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        Self {
            surge_threshold: 0.3,
            dip_threshold: 0.2,
            cooldown_ms: 30_000.0,
            tick_ms: 5_000.0,
        }
    }
}

/// Per-model cooldown bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScalerState {
    last_action_ms: BTreeMap<(PipelineId, ModelId), f64>,
}

impl ScalerState {
    fn in_cooldown(&self, key: &(PipelineId, ModelId), now_ms: f64, cfg: &ScalerConfig) -> bool {
        self.last_action_ms
            .get(key)
            .is_some_and(|last| now_ms - last < cfg.cooldown_ms - EPS)
    }

    /// Starts a model's cooldown. Called when an action is emitted — even
    /// if the apply later fails, so a full cluster is not hammered every
    /// tick.
    pub fn mark(&mut self, pipeline_id: &str, model_id: &str, now_ms: f64) {
        self.last_action_ms
            .insert((pipeline_id.to_string(), model_id.to_string()), now_ms);
    }

    /// Forgets cooldowns, e.g. after a full scheduler round replaces the
    /// fleet the cooldowns referred to.
    pub fn reset(&mut self) {
        self.last_action_ms.clear();
    }
}

/// One scaling decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ScaleAction {
    Up { pipeline_id: PipelineId, model_id: ModelId },
    Down { pipeline_id: PipelineId, model_id: ModelId, instance_number: u32 },
}

/// Total queries/second a model's current fleet can serve. An instance
/// holding a stream portion fires one batch per duty cycle; an unplaced
/// (queue-driven) instance ships batches back to back, one per batch
/// latency.
pub fn fleet_capacity_qps(
    plan: &PipelinePlan,
    model_id: &str,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
) -> f64 {
    let Some(profile) = profiles.get(model_id) else { return 0.0 };
    plan.instances_of(model_id)
        .iter()
        .filter_map(|cfg| {
            let device = cluster.device(&cfg.device_id)?;
            let latency = profile.latency_ms(&device.device_class, cfg.batch_size)?;
            let period = match &cfg.placement {
                Some(p) => latency.max(p.duty_cycle_ms),
                None => latency,
            };
            Some(cfg.batch_size as f64 / period * 1000.0)
        })
        .sum()
}

/// Compares observed per-model arrival rates (queries/second over the last
/// window, already demand-scaled to each model's position in its pipeline)
/// against fleet capacity and emits at most one action per model. Emitting
/// an action starts that model's cooldown.
pub fn evaluate(
    cfg: &ScalerConfig,
    state: &mut ScalerState,
    now_ms: f64,
    plans: &[PipelinePlan],
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    observed_qps: &BTreeMap<(PipelineId, ModelId), f64>,
) -> Vec<ScaleAction> {
    let mut actions = Vec::new();
    for plan in plans {
        for (model_id, instances) in &plan.instances {
            let n = instances.len();
            if n == 0 {
                continue;
            }
            let key = (plan.pipeline_id.clone(), model_id.clone());
            let observed = observed_qps.get(&key).copied().unwrap_or(0.0);
            if state.in_cooldown(&key, now_ms, cfg) {
                continue;
            }
            let capacity = fleet_capacity_qps(plan, model_id, cluster, profiles);
            if capacity <= 0.0 {
                continue;
            }
            if observed > capacity * (1.0 + cfg.surge_threshold) + EPS {
                state.mark(&plan.pipeline_id, model_id, now_ms);
                actions.push(ScaleAction::Up {
                    pipeline_id: plan.pipeline_id.clone(),
                    model_id: model_id.clone(),
                });
            } else if n > 1 {
                let shrunk = capacity * (n as f64 - 1.0) / n as f64;
                if observed < shrunk * (1.0 - cfg.dip_threshold) - EPS {
                    let highest = instances.iter().map(|c| c.instance_number).max().unwrap();
                    state.mark(&plan.pipeline_id, model_id, now_ms);
                    actions.push(ScaleAction::Down {
                        pipeline_id: plan.pipeline_id.clone(),
                        model_id: model_id.clone(),
                        instance_number: highest,
                    });
                }
            }
        }
    }
    actions
}

/// Adds one instance of a model, cloning the primary instance's batch size
/// and trying its device first, then the server. On success the plan gains
/// the placed config and the new instance number is returned.
pub fn apply_scale_up(
    plan: &mut PipelinePlan,
    pipeline: &PipelineSpec,
    model_id: &str,
    coral: &mut CoralState,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<u32, String> {
    let primary = plan
        .primary(model_id)
        .ok_or_else(|| format!("{model_id} has no instances to clone"))?
        .clone();
    let next_k = plan
        .instances_of(model_id)
        .iter()
        .map(|c| c.instance_number)
        .max()
        .map_or(0, |k| k + 1);

    let mut candidates = vec![primary.device_id.clone()];
    if cluster.server_device != primary.device_id {
        candidates.push(cluster.server_device.clone());
    }
    let mut last_reason = String::new();
    for device_id in candidates {
        let tentative = InstanceConfig {
            model_id: model_id.to_string(),
            instance_number: next_k,
            batch_size: primary.batch_size,
            device_id: device_id.clone(),
            gpu_id: primary.gpu_id.clone(),
            placement: None,
        };
        plan.instances.get_mut(model_id).unwrap().push(tentative);
        let placed = instance_need(plan, pipeline, &model_id.to_string(), next_k, cluster, profiles, bandwidth)
            .map_err(|reason| reason)
            .and_then(|need| coral.coral_place(&need).map(|ok| (ok, need)).map_err(|f| f.reason));
        match placed {
            Ok(((stream_key, portion), need)) => {
                let duty = coral.stream(&stream_key).unwrap().duty_cycle_ms;
                let cfg = plan
                    .instances
                    .get_mut(model_id)
                    .unwrap()
                    .iter_mut()
                    .find(|c| c.instance_number == next_k)
                    .unwrap();
                cfg.gpu_id = stream_key.gpu_id.clone();
                cfg.placement = Some(PortionPlacement {
                    gpu_id: stream_key.gpu_id,
                    stream_index: stream_key.stream,
                    start_ms: portion.start_ms,
                    end_ms: portion.end_ms,
                    duty_cycle_ms: duty,
                    width: need.width,
                });
                return Ok(next_k);
            }
            Err(reason) => {
                plan.instances
                    .get_mut(model_id)
                    .unwrap()
                    .retain(|c| c.instance_number != next_k);
                last_reason = format!("{device_id}: {reason}");
            }
        }
    }
    Err(last_reason)
}

/// Retires one instance: reclaims its stream portion and drops it from the
/// plan. Returns false if the instance was unknown.
pub fn apply_scale_down(
    plan: &mut PipelinePlan,
    model_id: &str,
    instance_number: u32,
    coral: &mut CoralState,
) -> bool {
    let Some(instances) = plan.instances.get_mut(model_id) else { return false };
    let before = instances.len();
    instances.retain(|c| c.instance_number != instance_number);
    if instances.len() == before {
        return false;
    }
    coral.remove_assignment(&InstanceKey {
        pipeline_id: plan.pipeline_id.clone(),
        model_id: model_id.to_string(),
        instance_number,
    });
    true
}
