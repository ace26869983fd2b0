//! Cross-device workload distribution: deciding, for every model of every
//! pipeline, where it runs (GPU server or the pipeline's edge device), at
//! what batch size, and with how many instances.
//!
//! The search runs once per scheduling round, from recent arrival
//! statistics:
//!
//! 1. Start every model on the server at the smallest batch size, with just
//!    enough instances for the offered load.
//! 2. Visit models in descending burstiness and repeatedly try doubling
//!    their batch size (dropping an instance when the bigger batch keeps
//!    capacity above demand). A candidate is adopted only if its worst-case
//!    latency stays within half the SLO — the other half is the
//!    co-location scheduler's duty-cycle budget — and it strictly improves
//!    estimated throughput.
//! 3. Walk the pipeline tree from the source, trying to move models onto
//!    the pipeline's edge device (children in ascending burstiness). A move
//!    must keep latency within half the SLO and not lose throughput. After
//!    descending, a model whose outputs outweigh its inputs — and whose
//!    children all stayed off the edge — is moved back: hosting it at the
//!    edge would amplify cross-link traffic instead of shrinking it.
//!
//! All tie-breaks are lexicographic on model id, so the search is fully
//! deterministic.
//!
//! Capacity comes in two flavors, chosen by the caller: queue-driven
//! instances ship batches back to back (one per batch latency), while
//! instances destined for duty-cycled stream portions fire one batch per
//! cycle. Sizing a portion-executed fleet with the queue-driven model would
//! over-promise capacity by the ratio of cycle length to batch latency.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{
    pipeline_worst_case_ms, BandwidthSnapshot, ClusterSpec, DeviceId, GpuKey, InstanceConfig,
    LatencyError, ModelAssign, ModelId, PipelineId, PipelinePlan, PipelineSpec, ProfileSet,
};
use crate::traces::RateStats;

/// Where the distributor looks models' rate statistics up: keyed by
/// pipeline and model because two pipelines may run the same model with
/// separate queues.
pub type StatsKey = (PipelineId, ModelId);
pub type ModelStatsMap = BTreeMap<StatsKey, RateStats>;

/// Tuning knobs for the distribution search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwdParams {
    /// Weight on input overhead in the edge-offload revert test: a model is
    /// pulled back to the server when `in_overhead * alpha < out_overhead`
    /// and none of its children made it to the edge.
    pub alpha: f64,
    /// Batch sizes the search may use (intersected with what profiles
    /// actually cover).
    pub batch_sizes: BTreeSet<u32>,
    /// Hard cap on instances per model.
    pub max_instances_per_model: u32,
}

impl Default for CwdParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            batch_sizes: BTreeSet::from([1, 2, 4, 8, 16, 32]),
            max_instances_per_model: 8,
        }
    }
}

/// Search-time restrictions, used by ablation policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwdOptions {
    /// When false, phase 3 is skipped and everything stays on the server.
    pub edge_offload: bool,
    /// When true, an instance's serving capacity is one batch per duty
    /// cycle (half the pipeline SLO) instead of back-to-back batches.
    /// Policies that hand the plan to the co-location scheduler must size
    /// fleets this way: a placed portion fires once per cycle, so sizing by
    /// raw batch latency would over-promise capacity several-fold.
    pub duty_cycle_capacity: bool,
}

impl Default for CwdOptions {
    fn default() -> Self {
        Self { edge_offload: true, duty_cycle_capacity: false }
    }
}

/// Working configuration of one model during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCfg {
    pub device_id: DeviceId,
    pub batch_size: u32,
    pub instances: u32,
}

const EPS: f64 = 1e-9;

// ── Estimators ──────────────────────────────────────────────────────────

/// Queries/s a fleet can serve. Queue-driven execution (`duty_ms: None`)
/// ships one batch per batch latency; duty-cycled execution ships one batch
/// per cycle, so the period is the cycle length (or the batch latency when
/// the batch overruns the cycle — such a portion cannot be placed anyway,
/// and the estimate should degrade rather than divide by the wrong period).
fn capacity_qps(
    profiles: &ProfileSet,
    cluster: &ClusterSpec,
    model: &str,
    cfg: &ModelCfg,
    duty_ms: Option<f64>,
) -> Option<f64> {
    let class = &cluster.device(&cfg.device_id)?.device_class;
    let lat = profiles.get(model)?.latency_ms(class, cfg.batch_size)?;
    let period = match duty_ms {
        Some(duty) => lat.max(duty),
        None => lat,
    };
    Some(cfg.instances as f64 * cfg.batch_size as f64 / period * 1000.0)
}

/// Estimated sustainable pipeline throughput (queries/s at the source)
/// under a working configuration: offered load, capped by each stage's
/// capacity normalized back to source volume. Zero if any stage is
/// unprofiled on its device. `duty_ms` switches stage capacity to
/// one-batch-per-cycle, for plans executed under duty-cycled portions.
pub fn est_throughput(
    pipeline: &PipelineSpec,
    cfgs: &BTreeMap<ModelId, ModelCfg>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    source_rate_qps: f64,
    duty_ms: Option<f64>,
) -> f64 {
    let mut est = source_rate_qps.max(0.0);
    for (model, cfg) in cfgs {
        let Some(cap) = capacity_qps(profiles, cluster, model, cfg, duty_ms) else {
            return 0.0;
        };
        let scale = pipeline.demand_scale(model, profiles);
        if scale > 0.0 {
            est = est.min(cap / scale);
        }
    }
    est
}

/// Worst-case end-to-end latency of a working configuration.
pub fn est_latency(
    pipeline: &PipelineSpec,
    cfgs: &BTreeMap<ModelId, ModelCfg>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<f64, LatencyError> {
    let assign: BTreeMap<ModelId, ModelAssign> = cfgs
        .iter()
        .map(|(m, c)| {
            (m.clone(), ModelAssign { device_id: c.device_id.clone(), batch_size: c.batch_size })
        })
        .collect();
    pipeline_worst_case_ms(pipeline, &assign, cluster, profiles, bandwidth)
}

// ── Memory bookkeeping ──────────────────────────────────────────────────

/// MiB already committed per GPU (by earlier pipelines in this round).
pub type GpuMemUsage = BTreeMap<GpuKey, f64>;

fn instance_footprint_mib(profiles: &ProfileSet, model: &str, batch_size: u32) -> Option<f64> {
    let p = profiles.get(model)?;
    Some(p.weight_mib + p.intermediate_mib(batch_size)?)
}

/// True when a configuration's instances all fit in GPU memory on their
/// chosen devices, given memory already committed by other pipelines.
pub(crate) fn fits_memory(
    pipeline: &PipelineSpec,
    cfgs: &BTreeMap<ModelId, ModelCfg>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    committed: &GpuMemUsage,
) -> bool {
    assign_gpus(pipeline, cfgs, cluster, profiles, committed, false).is_some()
}

/// Greedy GPU assignment for a pipeline's instances on their chosen
/// devices: instances go, in deterministic order, to the GPU with the most
/// remaining memory. Returns `None` when something does not fit.
fn assign_gpus(
    pipeline: &PipelineSpec,
    cfgs: &BTreeMap<ModelId, ModelCfg>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    base: &GpuMemUsage,
    forced: bool,
) -> Option<(BTreeMap<(ModelId, u32), GpuKey>, GpuMemUsage)> {
    let mut usage = base.clone();
    let mut assignment = BTreeMap::new();
    for model in pipeline.topo_order() {
        let cfg = cfgs.get(&model)?;
        let need = instance_footprint_mib(profiles, &model, cfg.batch_size)?;
        let device = cluster.device(&cfg.device_id)?;
        for k in 0..cfg.instances {
            // Most remaining memory first; GPU id breaks ties.
            let mut best: Option<(f64, GpuKey)> = None;
            for gpu in &device.gpus {
                let key = GpuKey::new(device.device_id.clone(), gpu.gpu_id.clone());
                let remaining =
                    gpu.mem_capacity_mib - usage.get(&key).copied().unwrap_or(0.0);
                let candidate = (remaining, key);
                if (forced || candidate.0 >= need - EPS)
                    && best
                        .as_ref()
                        .map(|b| candidate.0 > b.0 + EPS || ((candidate.0 - b.0).abs() <= EPS && candidate.1 < b.1))
                        .unwrap_or(true)
                {
                    best = Some(candidate);
                }
            }
            let (_, key) = best?;
            *usage.entry(key.clone()).or_insert(0.0) += need;
            assignment.insert((model.clone(), k), key);
        }
    }
    Some((assignment, usage))
}

// ── Per-pipeline search ─────────────────────────────────────────────────

struct Search<'a> {
    pipeline: &'a PipelineSpec,
    cluster: &'a ClusterSpec,
    profiles: &'a ProfileSet,
    bandwidth: &'a BandwidthSnapshot,
    params: &'a CwdParams,
    /// Queries/s into each model: source rate scaled by ancestor fanouts.
    demand: BTreeMap<ModelId, f64>,
    burst: BTreeMap<ModelId, f64>,
    source_rate: f64,
    base_mem: &'a GpuMemUsage,
    /// `Some(cycle length)` when instances serve one batch per duty cycle.
    duty_ms: Option<f64>,
}

struct Eval {
    latency_ms: Result<f64, LatencyError>,
    throughput_qps: f64,
}

impl<'a> Search<'a> {
    fn smallest_batch(&self, model: &str, device_id: &str) -> Option<u32> {
        let class = &self.cluster.device(device_id)?.device_class;
        let profile = self.profiles.get(model)?;
        profile
            .batch_sizes(class)
            .into_iter()
            .find(|bz| self.params.batch_sizes.contains(bz))
    }

    fn next_batch(&self, model: &str, device_id: &str, bz: u32) -> Option<u32> {
        let next = bz.checked_mul(2)?;
        if !self.params.batch_sizes.contains(&next) {
            return None;
        }
        let class = &self.cluster.device(device_id)?.device_class;
        let profile = self.profiles.get(model)?;
        (profile.latency_ms(class, next).is_some()
            && profile.util(class, next).is_some()
            && profile.intermediate_mib(next).is_some())
        .then_some(next)
    }

    fn size_to_demand(&self, model: &str, device_id: &str, bz: u32) -> u32 {
        let one = ModelCfg { device_id: device_id.into(), batch_size: bz, instances: 1 };
        let cap1 =
            capacity_qps(self.profiles, self.cluster, model, &one, self.duty_ms).unwrap_or(0.0);
        let demand = self.demand.get(model).copied().unwrap_or(0.0);
        if demand <= 0.0 || cap1 <= 0.0 {
            return 1;
        }
        (((demand / cap1) - EPS).ceil() as u32).clamp(1, self.params.max_instances_per_model)
    }

    fn fits(&self, cfgs: &BTreeMap<ModelId, ModelCfg>) -> bool {
        assign_gpus(self.pipeline, cfgs, self.cluster, self.profiles, self.base_mem, false)
            .is_some()
    }

    fn eval(&self, cfgs: &BTreeMap<ModelId, ModelCfg>) -> Eval {
        Eval {
            latency_ms: est_latency(self.pipeline, cfgs, self.cluster, self.profiles, self.bandwidth),
            throughput_qps: est_throughput(
                self.pipeline,
                cfgs,
                self.cluster,
                self.profiles,
                self.source_rate,
                self.duty_ms,
            ),
        }
    }

    fn within_latency_budget(&self, eval: &Eval) -> bool {
        matches!(eval.latency_ms, Ok(l) if l <= self.pipeline.slo_ms / 2.0 + EPS)
    }

    /// Phase 1: everything on the server at the smallest batch size, sized
    /// to demand, shrunk (leaf-ward first) until memory fits.
    fn minimal_config(&self) -> BTreeMap<ModelId, ModelCfg> {
        let server = self.cluster.server_device.clone();
        let mut cfgs = BTreeMap::new();
        for model in &self.pipeline.models {
            let bz = self.smallest_batch(model, &server).unwrap_or(1);
            cfgs.insert(
                model.clone(),
                ModelCfg {
                    device_id: server.clone(),
                    batch_size: bz,
                    instances: self.size_to_demand(model, &server, bz),
                },
            );
        }
        // If the server cannot hold the demand-sized fleet, retire
        // instances — largest fleets first, leaf-most on ties — until it
        // fits (or every model is down to one instance; the forced
        // assignment below then reports the overflow honestly through
        // plan validation).
        while !self.fits(&cfgs) {
            let topo = self.pipeline.topo_order();
            let victim = topo
                .iter()
                .rev()
                .filter(|m| cfgs[*m].instances > 1)
                .max_by_key(|m| cfgs[*m].instances);
            match victim {
                Some(m) => cfgs.get_mut(m).unwrap().instances -= 1,
                None => break,
            }
        }
        cfgs
    }

    /// One doubling candidate for `model`, instance count reduced by one
    /// when the bigger batch keeps capacity at or above demand.
    fn doubled(&self, cfgs: &BTreeMap<ModelId, ModelCfg>, model: &str) -> Option<BTreeMap<ModelId, ModelCfg>> {
        let cur = cfgs.get(model)?;
        let next_bz = self.next_batch(model, &cur.device_id, cur.batch_size)?;
        let mut cand = cfgs.clone();
        let slot = cand.get_mut(model).unwrap();
        slot.batch_size = next_bz;
        if slot.instances > 1 {
            let reduced = ModelCfg { instances: slot.instances - 1, ..slot.clone() };
            let cap = capacity_qps(self.profiles, self.cluster, model, &reduced, self.duty_ms)
                .unwrap_or(0.0);
            if cap + EPS >= self.demand.get(model).copied().unwrap_or(0.0) {
                slot.instances -= 1;
            }
        }
        Some(cand)
    }

    /// Phase 2: repeated doubling passes in descending burstiness until a
    /// full pass adopts nothing.
    fn improve_batches(&self, cfgs: &mut BTreeMap<ModelId, ModelCfg>) {
        let mut order: Vec<ModelId> = self.pipeline.models.clone();
        order.sort_by(|a, b| {
            let ba = self.burst.get(a).copied().unwrap_or(0.0);
            let bb = self.burst.get(b).copied().unwrap_or(0.0);
            bb.total_cmp(&ba).then_with(|| a.cmp(b))
        });
        let mut best = self.eval(cfgs).throughput_qps;
        loop {
            let mut adopted = false;
            for model in &order {
                let Some(cand) = self.doubled(cfgs, model) else { continue };
                if !self.fits(&cand) {
                    continue;
                }
                let eval = self.eval(&cand);
                if self.within_latency_budget(&eval) && eval.throughput_qps > best + EPS {
                    *cfgs = cand;
                    best = eval.throughput_qps;
                    adopted = true;
                }
            }
            if !adopted {
                break;
            }
        }
    }

    /// The constrained edge search for one model: smallest batch sized to
    /// demand, then a doubling ladder under the same latency/throughput
    /// rules. `None` when the edge cannot host the model at all.
    fn edge_candidate(
        &self,
        cfgs: &BTreeMap<ModelId, ModelCfg>,
        model: &str,
        edge: &str,
    ) -> Option<BTreeMap<ModelId, ModelCfg>> {
        let bz = self.smallest_batch(model, edge)?;
        let mut cand = cfgs.clone();
        cand.insert(
            model.to_string(),
            ModelCfg {
                device_id: edge.to_string(),
                batch_size: bz,
                instances: self.size_to_demand(model, edge, bz),
            },
        );
        // Shrink until the edge device's memory takes the fleet.
        while !self.fits(&cand) {
            let slot = cand.get_mut(model).unwrap();
            if slot.instances <= 1 {
                return None;
            }
            slot.instances -= 1;
        }
        let mut eval = self.eval(&cand);
        if !self.within_latency_budget(&eval) {
            return None;
        }
        loop {
            let Some(next) = self.doubled(&cand, model) else { break };
            if !self.fits(&next) {
                break;
            }
            let next_eval = self.eval(&next);
            if self.within_latency_budget(&next_eval)
                && next_eval.throughput_qps > eval.throughput_qps + EPS
            {
                cand = next;
                eval = next_eval;
            } else {
                break;
            }
        }
        // The move must not cost throughput; equal is fine — shedding
        // cross-link traffic at equal throughput is the point.
        let current = self.eval(cfgs).throughput_qps;
        (eval.throughput_qps + EPS >= current).then_some(cand)
    }

    /// Phase 3: recursive edge offload from the source, children visited in
    /// ascending burstiness, with the output-amplification revert after the
    /// subtree settles.
    fn to_edge(&self, cfgs: &mut BTreeMap<ModelId, ModelCfg>, model: &ModelId, edge: &str) {
        let before = cfgs.get(model).cloned();
        let mut moved = false;
        if cfgs.get(model).map(|c| c.device_id != edge).unwrap_or(false) {
            if let Some(cand) = self.edge_candidate(cfgs, model, edge) {
                *cfgs = cand;
                moved = true;
            }
        }

        let mut kids: Vec<ModelId> =
            self.pipeline.children(model).into_iter().cloned().collect();
        kids.sort_by(|a, b| {
            let ba = self.burst.get(a).copied().unwrap_or(0.0);
            let bb = self.burst.get(b).copied().unwrap_or(0.0);
            ba.total_cmp(&bb).then_with(|| a.cmp(b))
        });
        for child in &kids {
            self.to_edge(cfgs, child, edge);
        }

        if moved {
            let profile = self.profiles.get(model).expect("validated pipeline models have profiles");
            let rate = self.demand.get(model).copied().unwrap_or(0.0);
            let in_overhead = profile.in_bytes * rate;
            let out_overhead = profile.out_bytes * rate * profile.fanout;
            let any_child_on_edge = kids
                .iter()
                .any(|c| cfgs.get(c).map(|k| k.device_id == edge).unwrap_or(false));
            if in_overhead * self.params.alpha < out_overhead && !any_child_on_edge {
                // Hosting this model at the edge amplifies what must cross
                // the link; undo the move.
                *cfgs.get_mut(model).unwrap() = before.expect("model existed before the move");
            }
        }
    }
}

// ── Entry points ────────────────────────────────────────────────────────

/// Runs the full distribution search for every pipeline, in declaration
/// order, against shared cluster memory.
pub fn cwd_schedule(
    pipelines: &[PipelineSpec],
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    stats: &ModelStatsMap,
    bandwidth: &BandwidthSnapshot,
    params: &CwdParams,
) -> Vec<PipelinePlan> {
    cwd_schedule_opts(pipelines, cluster, profiles, stats, bandwidth, params, CwdOptions::default())
}

/// [`cwd_schedule`] with search restrictions (used by ablation policies).
pub fn cwd_schedule_opts(
    pipelines: &[PipelineSpec],
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    stats: &ModelStatsMap,
    bandwidth: &BandwidthSnapshot,
    params: &CwdParams,
    options: CwdOptions,
) -> Vec<PipelinePlan> {
    let mut plans = Vec::with_capacity(pipelines.len());
    let mut committed: GpuMemUsage = GpuMemUsage::new();

    for pipeline in pipelines {
        let source = pipeline.source().clone();
        let source_stats = stats
            .get(&(pipeline.pipeline_id.clone(), source.clone()))
            .copied()
            .unwrap_or_default();
        let mut demand = BTreeMap::new();
        let mut burst = BTreeMap::new();
        for model in &pipeline.models {
            demand.insert(
                model.clone(),
                source_stats.mean_rate_qps * pipeline.demand_scale(model, profiles),
            );
            let b = stats
                .get(&(pipeline.pipeline_id.clone(), model.clone()))
                .map(|s| s.burstiness)
                .unwrap_or(source_stats.burstiness);
            burst.insert(model.clone(), b);
        }

        let duty_ms = options.duty_cycle_capacity.then(|| pipeline.slo_ms / 2.0);
        let search = Search {
            pipeline,
            cluster,
            profiles,
            bandwidth,
            params,
            demand,
            burst,
            source_rate: source_stats.mean_rate_qps,
            base_mem: &committed,
            duty_ms,
        };

        let mut cfgs = search.minimal_config();
        search.improve_batches(&mut cfgs);
        if options.edge_offload && pipeline.source_device != cluster.server_device {
            let edge = pipeline.source_device.clone();
            if cluster.device(&edge).is_some() {
                search.to_edge(&mut cfgs, &source, &edge);
            }
        }

        let source_rate = search.source_rate;
        drop(search);
        let (plan, usage) = materialize_plan(
            pipeline, &cfgs, cluster, profiles, bandwidth, &committed, source_rate, duty_ms,
        );
        committed = usage;
        plans.push(plan);
    }
    plans
}

/// Turns a working configuration into a concrete plan: greedy GPU
/// assignment (forced as a last resort so the plan stays complete —
/// validation reports any overflow), latency/throughput estimates, and the
/// saturation flag. Returns the plan plus cumulative GPU memory usage for
/// the next pipeline in the round.
pub(crate) fn materialize_plan(
    pipeline: &PipelineSpec,
    cfgs: &BTreeMap<ModelId, ModelCfg>,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
    committed: &GpuMemUsage,
    source_rate: f64,
    duty_ms: Option<f64>,
) -> (PipelinePlan, GpuMemUsage) {
    let (assignment, usage) = assign_gpus(pipeline, cfgs, cluster, profiles, committed, false)
        .or_else(|| assign_gpus(pipeline, cfgs, cluster, profiles, committed, true))
        .expect("forced assignment always succeeds on a validated cluster");

    let throughput =
        est_throughput(pipeline, cfgs, cluster, profiles, source_rate, duty_ms);
    let latency = est_latency(pipeline, cfgs, cluster, profiles, bandwidth);
    let saturated = source_rate > 0.0 && throughput + EPS < source_rate;

    let mut plan = PipelinePlan::new(pipeline.pipeline_id.clone());
    plan.est_latency_ms = latency.unwrap_or(f64::INFINITY);
    plan.est_throughput_qps = throughput;
    plan.saturated = saturated;
    for (model, cfg) in cfgs {
        let mut list = Vec::with_capacity(cfg.instances as usize);
        for k in 0..cfg.instances {
            let gpu = assignment
                .get(&(model.clone(), k))
                .expect("assignment covers every instance");
            list.push(InstanceConfig {
                model_id: model.clone(),
                instance_number: k,
                batch_size: cfg.batch_size,
                device_id: cfg.device_id.clone(),
                gpu_id: gpu.gpu_id.clone(),
                placement: None,
            });
        }
        plan.instances.insert(model.clone(), list);
    }
    (plan, usage)
}
