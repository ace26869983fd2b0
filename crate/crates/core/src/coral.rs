//! Co-location scheduling: laying model instances out as repeating time
//! portions on per-GPU inference streams, so co-located models take turns
//! instead of contending.
//!
//! Every GPU exposes a small number of streams (temporal lanes). A placed
//! instance owns a *portion* — a `[start, end)` window that repeats every
//! duty cycle — whose length is its batch execution time and whose width is
//! its compute share. A pipeline's chain of portions is laid end to end,
//! offset by the IO time between devices, so data flows through the whole
//! pipeline within one duty cycle: half the SLO, leaving the other half for
//! queueing ahead of the first stage.
//!
//! Placement walks instance rounds fairly (instance k of every model before
//! instance k+1 of any), scanning the model's device for the first free
//! portion that satisfies three conditions:
//!
//! 1. **Containment** — the free portion covers the needed window.
//! 2. **Capacity** — the GPU stays within memory and utilization if the
//!    instance joins: per stream only the largest intermediate footprint
//!    and the widest portion count, because portions on one stream never
//!    run concurrently.
//! 3. **Duty compatibility** — the instance's duty cycle is no shorter than
//!    the stream's, so it can safely execute at the stream's (faster or
//!    equal) period.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{
    BandwidthSnapshot, ClusterSpec, DeviceId, GpuId, GpuKey, ModelId, PipelineId, PipelinePlan,
    PipelineSpec, PortionPlacement, ProfileSet, UnplacedInstance,
};

const EPS: f64 = 1e-9;

/// The duty cycle a pipeline's instances request: half the SLO.
pub fn duty_cycle_ms(slo_ms: f64) -> f64 {
    slo_ms / 2.0
}

/// One stream (temporal lane) of one GPU.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct StreamKey {
    pub device_id: DeviceId,
    pub gpu_id: GpuId,
    pub stream: u32,
}

/// A `[start, end)` time window within a duty cycle, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Portion {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Portion {
    pub fn new(start_ms: f64, end_ms: f64) -> Self {
        Self { start_ms, end_ms }
    }

    pub fn len_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    /// True if `other` lies entirely within this portion.
    pub fn contains(&self, other: &Portion) -> bool {
        self.start_ms <= other.start_ms + EPS && self.end_ms + EPS >= other.end_ms
    }
}

/// Identity of one placed (or placeable) instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct InstanceKey {
    pub pipeline_id: PipelineId,
    pub model_id: ModelId,
    pub instance_number: u32,
}

/// A placed instance on a stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub key: InstanceKey,
    pub portion: Portion,
    pub width: f64,
    pub weight_mib: f64,
    pub intermediate_mib: f64,
    pub batch_size: u32,
}

/// Everything `coral_place` needs to know about the instance it is placing.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNeed {
    pub key: InstanceKey,
    pub device_id: DeviceId,
    pub batch_size: u32,
    pub weight_mib: f64,
    pub intermediate_mib: f64,
    pub width: f64,
    /// The absolute window within the duty cycle the instance must own,
    /// already offset by upstream portions and IO time.
    pub portion: Portion,
    pub duty_cycle_ms: f64,
    /// Source models have no upstream anchor: their window may slide to
    /// the earliest free slot instead of being fixed at `portion`.
    pub slide: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StreamState {
    /// 0 until the first assignment fixes the stream's period.
    pub duty_cycle_ms: f64,
    /// Assignments sorted by portion start.
    pub assigned: Vec<Assignment>,
    /// Free portions sorted by start, non-overlapping, coalesced. A single
    /// `[0, inf)` entry while the duty cycle is unset.
    pub free: Vec<Portion>,
}

impl StreamState {
    fn fresh() -> Self {
        Self {
            duty_cycle_ms: 0.0,
            assigned: Vec::new(),
            free: vec![Portion::new(0.0, f64::INFINITY)],
        }
    }

    fn max_intermediate(&self) -> f64 {
        self.assigned.iter().map(|a| a.intermediate_mib).fold(0.0, f64::max)
    }

    fn max_width(&self) -> f64 {
        self.assigned.iter().map(|a| a.width).fold(0.0, f64::max)
    }

    fn weight(&self) -> f64 {
        self.assigned.iter().map(|a| a.weight_mib).sum()
    }

    /// Inserts a portion into the free list, coalescing with neighbors.
    fn insert_free(&mut self, portion: Portion) {
        if portion.len_ms() <= EPS {
            return;
        }
        self.free.push(portion);
        self.free.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
        let mut merged: Vec<Portion> = Vec::with_capacity(self.free.len());
        for p in self.free.drain(..) {
            match merged.last_mut() {
                Some(last) if p.start_ms <= last.end_ms + EPS => {
                    last.end_ms = last.end_ms.max(p.end_ms);
                }
                _ => merged.push(p),
            }
        }
        self.free = merged;
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CoralError {
    #[error("needed window [{needed_start}, {needed_end}) is not contained in portion [{have_start}, {have_end})")]
    NotContained {
        have_start: f64,
        have_end: f64,
        needed_start: f64,
        needed_end: f64,
    },
}

/// Splits `portion` around `needed`, returning the claimed window and the
/// zero, one, or two remainders that stay free. Errors if `needed` is not
/// contained — callers must have checked containment already.
pub fn divide_portion(
    portion: Portion,
    needed: Portion,
) -> Result<(Portion, Vec<Portion>), CoralError> {
    if !portion.contains(&needed) || needed.len_ms() < 0.0 {
        return Err(CoralError::NotContained {
            have_start: portion.start_ms,
            have_end: portion.end_ms,
            needed_start: needed.start_ms,
            needed_end: needed.end_ms,
        });
    }
    let mut rest = Vec::new();
    let prefix = Portion::new(portion.start_ms, needed.start_ms);
    if prefix.len_ms() > EPS {
        rest.push(prefix);
    }
    let suffix = Portion::new(needed.end_ms, portion.end_ms);
    if suffix.len_ms() > EPS {
        rest.push(suffix);
    }
    Ok((needed, rest))
}

/// GPU capacity limits mirrored from the cluster spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct GpuCaps {
    mem_capacity_mib: f64,
    max_util: f64,
}

/// Placement state for the whole cluster: every stream of every GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoralState {
    streams: BTreeMap<StreamKey, StreamState>,
    caps: BTreeMap<GpuKey, GpuCaps>,
}

/// Why an instance could not be placed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceFailure {
    pub key: InstanceKey,
    pub reason: String,
}

impl CoralState {
    pub fn new(cluster: &ClusterSpec) -> Self {
        let mut streams = BTreeMap::new();
        let mut caps = BTreeMap::new();
        for device in &cluster.devices {
            for gpu in &device.gpus {
                let gk = GpuKey::new(device.device_id.clone(), gpu.gpu_id.clone());
                caps.insert(
                    gk,
                    GpuCaps { mem_capacity_mib: gpu.mem_capacity_mib, max_util: gpu.max_util },
                );
                for s in 0..gpu.stream_count {
                    streams.insert(
                        StreamKey {
                            device_id: device.device_id.clone(),
                            gpu_id: gpu.gpu_id.clone(),
                            stream: s,
                        },
                        StreamState::fresh(),
                    );
                }
            }
        }
        Self { streams, caps }
    }

    pub fn stream(&self, key: &StreamKey) -> Option<&StreamState> {
        self.streams.get(key)
    }

    pub fn streams(&self) -> impl Iterator<Item = (&StreamKey, &StreamState)> {
        self.streams.iter()
    }

    /// Resident weight on a GPU: sum over all its streams.
    pub fn gpu_weight_mib(&self, gpu: &GpuKey) -> f64 {
        self.gpu_streams(gpu).map(|(_, s)| s.weight()).sum()
    }

    /// Worst-case concurrent intermediate footprint: one per stream (the
    /// largest), because a stream runs one portion at a time.
    pub fn gpu_intermediate_mib(&self, gpu: &GpuKey) -> f64 {
        self.gpu_streams(gpu).map(|(_, s)| s.max_intermediate()).sum()
    }

    /// Worst-case concurrent utilization: each stream's widest portion.
    pub fn gpu_util(&self, gpu: &GpuKey) -> f64 {
        self.gpu_streams(gpu).map(|(_, s)| s.max_width()).sum()
    }

    fn gpu_streams(&self, gpu: &GpuKey) -> impl Iterator<Item = (&StreamKey, &StreamState)> {
        let gpu = gpu.clone();
        self.streams
            .iter()
            .filter(move |(k, _)| k.device_id == gpu.device_id && k.gpu_id == gpu.gpu_id)
    }

    /// All free portions on a device, in (gpu, stream, start) order: the
    /// list `coral_place` scans.
    pub fn free_portions(&self, device_id: &str) -> Vec<(StreamKey, Portion)> {
        let mut out = Vec::new();
        for (key, state) in &self.streams {
            if key.device_id == device_id {
                for p in &state.free {
                    out.push((key.clone(), *p));
                }
            }
        }
        out
    }

    /// Tries to place one instance, scanning the device's streams in key
    /// order and each stream's free portions in start order; the first
    /// portion passing all three conditions wins. On success the free list
    /// is divided, tallies implicitly update, and the claimed placement is
    /// returned; `Err` carries the reason no portion qualified.
    pub fn coral_place(&mut self, need: &InstanceNeed) -> Result<(StreamKey, Portion), PlaceFailure> {
        let fail = |reason: &str| PlaceFailure {
            key: need.key.clone(),
            reason: reason.to_string(),
        };
        let span = if need.slide { need.portion.len_ms() } else { need.portion.end_ms };
        if span > need.duty_cycle_ms + EPS {
            return Err(fail("window exceeds the duty cycle"));
        }
        let keys: Vec<StreamKey> = self
            .streams
            .keys()
            .filter(|k| k.device_id == need.device_id)
            .cloned()
            .collect();
        if keys.is_empty() {
            return Err(fail("device has no streams"));
        }
        let mut saw_capacity_issue = false;
        for key in keys {
            let gpu_key = GpuKey::new(key.device_id.clone(), key.gpu_id.clone());
            let caps = self.caps[&gpu_key];
            let stream = &self.streams[&key];

            // Condition 3: duty compatibility.
            if stream.duty_cycle_ms > 0.0 && need.duty_cycle_ms + EPS < stream.duty_cycle_ms {
                continue;
            }
            // Condition 1: containment — a fixed window must fit where it
            // is; a sliding one claims the earliest slot long enough.
            let window = if need.slide {
                let len = need.portion.len_ms();
                let bound = if stream.duty_cycle_ms > 0.0 {
                    stream.duty_cycle_ms
                } else {
                    need.duty_cycle_ms
                };
                stream.free.iter().find_map(|p| {
                    let end = p.start_ms + len;
                    (end <= p.end_ms + EPS && end <= bound + EPS)
                        .then(|| Portion::new(p.start_ms, end))
                })
            } else {
                stream
                    .free
                    .iter()
                    .any(|p| p.contains(&need.portion))
                    .then_some(need.portion)
            };
            let Some(window) = window else { continue };
            // Condition 2: capacity if this instance joins this stream.
            let weight = self.gpu_weight_mib(&gpu_key) + need.weight_mib;
            let intermediate = self.gpu_intermediate_mib(&gpu_key) - stream.max_intermediate()
                + stream.max_intermediate().max(need.intermediate_mib);
            if weight + intermediate > caps.mem_capacity_mib + EPS {
                saw_capacity_issue = true;
                continue;
            }
            let util = self.gpu_util(&gpu_key) - stream.max_width()
                + stream.max_width().max(need.width);
            if util > caps.max_util + EPS {
                saw_capacity_issue = true;
                continue;
            }

            // Claim it.
            let stream = self.streams.get_mut(&key).unwrap();
            if stream.duty_cycle_ms == 0.0 {
                stream.duty_cycle_ms = need.duty_cycle_ms;
                // The infinite free tail collapses to the duty window.
                for p in &mut stream.free {
                    p.end_ms = p.end_ms.min(need.duty_cycle_ms);
                }
                stream.free.retain(|p| p.len_ms() > EPS);
            }
            // Re-find after the clamp (the window ends within the duty
            // cycle, so containment survives it).
            let idx = stream
                .free
                .iter()
                .position(|p| p.contains(&window))
                .expect("containment verified before claiming");
            let free_portion = stream.free.remove(idx);
            let (claimed, rest) = divide_portion(free_portion, window)
                .expect("containment verified before dividing");
            for r in rest {
                stream.insert_free(r);
            }
            stream.assigned.push(Assignment {
                key: need.key.clone(),
                portion: claimed,
                width: need.width,
                weight_mib: need.weight_mib,
                intermediate_mib: need.intermediate_mib,
                batch_size: need.batch_size,
            });
            stream.assigned.sort_by(|a, b| a.portion.start_ms.total_cmp(&b.portion.start_ms));
            return Ok((key, claimed));
        }
        if saw_capacity_issue {
            Err(fail("no stream within GPU memory/utilization limits"))
        } else {
            Err(fail("no free portion contains the needed window"))
        }
    }

    /// Removes an instance's assignment, reclaiming its portion. The freed
    /// window coalesces with its neighbors; a stream whose last assignment
    /// leaves resets to a fresh, unset-duty state. Returns the stream the
    /// instance was on, or `None` if it was not placed.
    pub fn remove_assignment(&mut self, key: &InstanceKey) -> Option<StreamKey> {
        let stream_key = self
            .streams
            .iter()
            .find(|(_, s)| s.assigned.iter().any(|a| &a.key == key))
            .map(|(k, _)| k.clone())?;
        let stream = self.streams.get_mut(&stream_key).unwrap();
        let idx = stream.assigned.iter().position(|a| &a.key == key).unwrap();
        let removed = stream.assigned.remove(idx);
        if stream.assigned.is_empty() {
            *stream = StreamState::fresh();
        } else {
            stream.insert_free(removed.portion);
        }
        Some(stream_key)
    }

    /// The placement of one instance, if any.
    pub fn assignment_of(&self, key: &InstanceKey) -> Option<(&StreamKey, &Assignment)> {
        for (sk, state) in &self.streams {
            if let Some(a) = state.assigned.iter().find(|a| &a.key == key) {
                return Some((sk, a));
            }
        }
        None
    }
}

// ── Full-plan scheduling ────────────────────────────────────────────────

/// Computes the window instance `k` of `model` must own: downstream of its
/// parent's portion plus the IO time of one query's input over the path
/// between their devices. Returns the need, or a human-readable reason it
/// cannot be computed. The instance's config must already be in the plan.
#[allow(clippy::too_many_arguments)]
pub fn instance_need(
    plan: &PipelinePlan,
    pipeline: &PipelineSpec,
    model: &ModelId,
    k: u32,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<InstanceNeed, String> {
    let cfg = plan
        .instances_of(model)
        .iter()
        .find(|c| c.instance_number == k)
        .ok_or_else(|| format!("instance {k} missing"))?;
    let profile = profiles.get(model).ok_or_else(|| format!("no profile for {model}"))?;
    let device = cluster
        .device(&cfg.device_id)
        .ok_or_else(|| format!("unknown device {}", cfg.device_id))?;
    let class = &device.device_class;
    let latency = profile
        .latency_ms(class, cfg.batch_size)
        .ok_or_else(|| format!("no latency profile for ({class}, {})", cfg.batch_size))?;
    let width = profile
        .util(class, cfg.batch_size)
        .ok_or_else(|| format!("no utilization profile for ({class}, {})", cfg.batch_size))?;
    let intermediate = profile
        .intermediate_mib(cfg.batch_size)
        .ok_or_else(|| format!("no intermediate footprint for batch {}", cfg.batch_size))?;

    let start = match pipeline.parent(model) {
        None => 0.0,
        Some(parent) => {
            let placed: Vec<&PortionPlacement> = plan
                .instances_of(parent)
                .iter()
                .filter_map(|c| c.placement.as_ref())
                .collect();
            if placed.is_empty() {
                return Err(format!("parent {parent} has no placed instance"));
            }
            let anchor = placed[k as usize % placed.len()];
            let parent_device = plan
                .primary(parent)
                .map(|c| c.device_id.clone())
                .unwrap_or_default();
            let io_ms = if parent_device == cfg.device_id {
                profile.in_bytes / device.intra_bw_bytes_per_sec * 1000.0
            } else {
                match bandwidth.get(&parent_device, &cfg.device_id) {
                    None => return Err(format!("no bandwidth data for {parent_device}-{}", cfg.device_id)),
                    Some(bw) if bw <= 0.0 => {
                        return Err(format!("link {parent_device}-{} is down", cfg.device_id))
                    }
                    Some(bw) => profile.in_bytes / bw * 1000.0,
                }
            };
            anchor.end_ms + io_ms
        }
    };

    Ok(InstanceNeed {
        key: InstanceKey {
            pipeline_id: plan.pipeline_id.clone(),
            model_id: model.clone(),
            instance_number: k,
        },
        device_id: cfg.device_id.clone(),
        batch_size: cfg.batch_size,
        weight_mib: profile.weight_mib,
        intermediate_mib: intermediate,
        width,
        portion: Portion::new(start, start + latency),
        duty_cycle_ms: duty_cycle_ms(pipeline.slo_ms),
        slide: pipeline.parent(model).is_none(),
    })
}

/// Places every instance of every plan onto streams, mutating plans in
/// place: successful instances get their `placement` (and final GPU).
///
/// Rounds are fair across models and pipelines: instance k of every model
/// (pipelines in order, models in topo order) is placed before instance
/// k+1 of any, so scarce streams serve every model's first copy before
/// anyone's second.
///
/// The workload distributor budgets memory, not stream geometry, so a
/// device can be handed more concurrent width — or tighter anchor windows —
/// than its streams admit. An instance refused by its assigned device is
/// retargeted to the server (nearest profiled batch size) and tried once
/// more there; only an instance the server also refuses moves to the
/// plan's `unplaced` list.
pub fn coral_schedule(
    plans: &mut [PipelinePlan],
    pipelines: &[PipelineSpec],
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> CoralState {
    let mut state = CoralState::new(cluster);
    let by_id: BTreeMap<&str, &PipelineSpec> =
        pipelines.iter().map(|p| (p.pipeline_id.as_str(), p)).collect();

    let max_rounds = plans
        .iter()
        .flat_map(|plan| plan.instances.values())
        .map(|v| v.len() as u32)
        .max()
        .unwrap_or(0);

    for k in 0..max_rounds {
        for plan in plans.iter_mut() {
            let Some(pipeline) = by_id.get(plan.pipeline_id.as_str()) else { continue };
            for model in pipeline.topo_order() {
                let has_k = plan
                    .instances_of(&model)
                    .iter()
                    .any(|c| c.instance_number == k);
                if !has_k {
                    continue;
                }
                let mut outcome =
                    place_instance(&mut state, plan, pipeline, &model, k, cluster, profiles, bandwidth);
                if let Err(refusal) = &outcome {
                    let refusal = refusal.clone();
                    if retarget_to_server(plan, &model, k, cluster, profiles) {
                        outcome = place_instance(
                            &mut state, plan, pipeline, &model, k, cluster, profiles, bandwidth,
                        )
                        .map_err(|r| format!("{refusal}; server fallback: {r}"));
                    }
                }
                if let Err(reason) = outcome {
                    plan.instances
                        .get_mut(&model)
                        .unwrap()
                        .retain(|c| c.instance_number != k);
                    plan.unplaced.push(UnplacedInstance {
                        model_id: model.clone(),
                        instance_number: k,
                        reason,
                    });
                }
            }
        }
    }
    state
}

/// Resolves instance `k` of `model` into a need, claims a portion for it,
/// and commits the placement into the plan.
#[allow(clippy::too_many_arguments)]
fn place_instance(
    state: &mut CoralState,
    plan: &mut PipelinePlan,
    pipeline: &PipelineSpec,
    model: &ModelId,
    k: u32,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    bandwidth: &BandwidthSnapshot,
) -> Result<(), String> {
    let need = instance_need(plan, pipeline, model, k, cluster, profiles, bandwidth)?;
    let (stream_key, portion) = state.coral_place(&need).map_err(|f| f.reason)?;
    let duty = state.streams[&stream_key].duty_cycle_ms;
    let cfg = plan
        .instances
        .get_mut(model)
        .unwrap()
        .iter_mut()
        .find(|c| c.instance_number == k)
        .unwrap();
    cfg.gpu_id = stream_key.gpu_id.clone();
    cfg.placement = Some(PortionPlacement {
        gpu_id: stream_key.gpu_id.clone(),
        stream_index: stream_key.stream,
        start_ms: portion.start_ms,
        end_ms: portion.end_ms,
        duty_cycle_ms: duty,
        width: need.width,
    });
    Ok(())
}

/// Retargets instance `k` of `model` to the server at the nearest profiled
/// batch size, ready for a placement retry. False when the instance is
/// already there or the server cannot run the model at all.
fn retarget_to_server(
    plan: &mut PipelinePlan,
    model: &ModelId,
    k: u32,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
) -> bool {
    let server = &cluster.server_device;
    let Some(device) = cluster.device(server) else { return false };
    let Some(cfg) = plan
        .instances
        .get_mut(model)
        .and_then(|v| v.iter_mut().find(|c| c.instance_number == k))
    else {
        return false;
    };
    if cfg.device_id == *server {
        return false;
    }
    let Some(profile) = profiles.get(model) else { return false };
    let sizes = profile.batch_sizes(&device.device_class);
    let Some(bz) = sizes
        .iter()
        .rev()
        .find(|&&b| b <= cfg.batch_size)
        .or_else(|| sizes.first())
    else {
        return false;
    };
    cfg.batch_size = *bz;
    cfg.device_id = server.clone();
    if let Some(gpu) = device.gpus.first() {
        cfg.gpu_id = gpu.gpu_id.clone();
    }
    true
}

// ── Reporting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortionReport {
    pub pipeline_id: PipelineId,
    pub model_id: ModelId,
    pub instance_number: u32,
    pub start_ms: f64,
    pub end_ms: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamReport {
    pub stream: u32,
    /// 0 when the stream is still unset (no assignments).
    pub duty_cycle_ms: f64,
    pub portions: Vec<PortionReport>,
    /// Free windows, finite entries only (an unset stream is all free).
    pub free: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuReport {
    pub weight_mib: f64,
    pub intermediate_mib: f64,
    pub util: f64,
    pub streams: Vec<StreamReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnplacedReport {
    pub pipeline_id: PipelineId,
    pub model_id: ModelId,
    pub instance_number: u32,
    pub reason: String,
}

/// A serializable snapshot of the whole placement: what runs where, when
/// within each duty cycle, and what fit nowhere.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlacementReport {
    pub gpus: BTreeMap<String, GpuReport>,
    pub unplaced: Vec<UnplacedReport>,
}

/// Builds the report from placement state and the plans' unplaced lists.
pub fn placement_report(state: &CoralState, plans: &[PipelinePlan]) -> PlacementReport {
    let mut gpus: BTreeMap<String, GpuReport> = BTreeMap::new();
    for (gpu_key, _) in state.caps.iter() {
        let report = GpuReport {
            weight_mib: state.gpu_weight_mib(gpu_key),
            intermediate_mib: state.gpu_intermediate_mib(gpu_key),
            util: state.gpu_util(gpu_key),
            streams: state
                .gpu_streams(gpu_key)
                .map(|(sk, ss)| StreamReport {
                    stream: sk.stream,
                    duty_cycle_ms: ss.duty_cycle_ms,
                    portions: ss
                        .assigned
                        .iter()
                        .map(|a| PortionReport {
                            pipeline_id: a.key.pipeline_id.clone(),
                            model_id: a.key.model_id.clone(),
                            instance_number: a.key.instance_number,
                            start_ms: a.portion.start_ms,
                            end_ms: a.portion.end_ms,
                            width: a.width,
                        })
                        .collect(),
                    free: ss
                        .free
                        .iter()
                        .filter(|p| p.end_ms.is_finite())
                        .map(|p| (p.start_ms, p.end_ms))
                        .collect(),
                })
                .collect(),
        };
        gpus.insert(gpu_key.to_string(), report);
    }
    let mut unplaced = Vec::new();
    for plan in plans {
        for u in &plan.unplaced {
            unplaced.push(UnplacedReport {
                pipeline_id: plan.pipeline_id.clone(),
                model_id: u.model_id.clone(),
                instance_number: u.instance_number,
                reason: u.reason.clone(),
            });
        }
    }
    PlacementReport { gpus, unplaced }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DeviceSpec, GpuSpec, InstanceConfig, ModelProfile};
    use proptest::prelude::*;

    // ── Test fixtures ───────────────────────────────────────────────────

    fn profile(id: &str, weight: f64, inter: f64, latency: f64, width: f64, in_bytes: f64) -> ModelProfile {
        ModelProfile {
            model_id: id.into(),
            weight_mib: weight,
            intermediate_mib: BTreeMap::from([(1, inter), (4, inter * 4.0)]),
            batch_latency_ms: BTreeMap::from([
                ("server_gpu".to_string(), BTreeMap::from([(1, latency), (4, latency * 2.0)])),
                ("agx".to_string(), BTreeMap::from([(1, latency * 2.0), (4, latency * 4.0)])),
            ]),
            utilization: BTreeMap::from([
                ("server_gpu".to_string(), BTreeMap::from([(1, width), (4, (width * 1.5).min(1.0))])),
                ("agx".to_string(), BTreeMap::from([(1, (width * 2.0).min(1.0)), (4, (width * 2.5).min(1.0))])),
            ]),
            in_bytes,
            out_bytes: 1_000.0,
            fanout: 1.0,
        }
    }

    fn cluster(server_streams: u32, server_mem: f64, max_util: f64) -> ClusterSpec {
        ClusterSpec {
            devices: vec![
                DeviceSpec {
                    device_id: "server".into(),
                    device_class: "server_gpu".into(),
                    gpus: vec![GpuSpec {
                        gpu_id: "g0".into(),
                        mem_capacity_mib: server_mem,
                        max_util,
                        stream_count: server_streams,
                    }],
                    intra_bw_bytes_per_sec: 1e10,
                },
                DeviceSpec {
                    device_id: "edge0".into(),
                    device_class: "agx".into(),
                    gpus: vec![GpuSpec {
                        gpu_id: "g0".into(),
                        mem_capacity_mib: 8_192.0,
                        max_util: 1.0,
                        stream_count: 2,
                    }],
                    intra_bw_bytes_per_sec: 1e10,
                },
            ],
            server_device: "server".into(),
        }
    }

    fn need(id: &str, device: &str, window: (f64, f64), width: f64, duty: f64) -> InstanceNeed {
        InstanceNeed {
            key: InstanceKey {
                pipeline_id: "p".into(),
                model_id: id.into(),
                instance_number: 0,
            },
            device_id: device.into(),
            batch_size: 1,
            weight_mib: 100.0,
            intermediate_mib: 10.0,
            width,
            portion: Portion::new(window.0, window.1),
            duty_cycle_ms: duty,
            slide: false,
        }
    }

    /// Recomputes every invariant from scratch: per-GPU capacity rules and
    /// per-stream geometry (no overlaps; free + assigned partition
    /// [0, duty) exactly for duty-set streams).
    fn audit(state: &CoralState, cluster: &ClusterSpec) {
        for (sk, ss) in state.streams() {
            let mut windows: Vec<(f64, f64, bool)> = ss
                .assigned
                .iter()
                .map(|a| (a.portion.start_ms, a.portion.end_ms, true))
                .chain(ss.free.iter().map(|p| (p.start_ms, p.end_ms, false)))
                .collect();
            windows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut cursor = 0.0;
            for (start, end, _) in &windows {
                assert!((start - cursor).abs() < 1e-6, "gap or overlap at {start} on {sk:?}");
                assert!(end > start, "empty window on {sk:?}");
                cursor = *end;
            }
            if ss.duty_cycle_ms > 0.0 {
                assert!(
                    (cursor - ss.duty_cycle_ms).abs() < 1e-6,
                    "stream {sk:?} does not partition [0, duty): ends at {cursor}"
                );
            } else {
                assert!(ss.assigned.is_empty());
                assert_eq!(ss.free.len(), 1);
                assert!(ss.free[0].end_ms.is_infinite());
            }
        }
        for key in cluster.gpu_keys() {
            let gpu = cluster.gpu(&key).unwrap();
            let mem = state.gpu_weight_mib(&key) + state.gpu_intermediate_mib(&key);
            assert!(mem <= gpu.mem_capacity_mib + 1e-6, "gpu {key} memory {mem}");
            assert!(state.gpu_util(&key) <= gpu.max_util + 1e-6, "gpu {key} util");
        }
    }

    // ── divide_portion ──────────────────────────────────────────────────

    #[test]
    fn divide_portion_returns_prefix_and_suffix() {
        let (claimed, rest) =
            divide_portion(Portion::new(0.0, 100.0), Portion::new(30.0, 55.0)).unwrap();
        assert_eq!(claimed, Portion::new(30.0, 55.0));
        assert_eq!(rest, vec![Portion::new(0.0, 30.0), Portion::new(55.0, 100.0)]);

        // Flush edges leave a single remainder or none.
        let (_, rest) = divide_portion(Portion::new(0.0, 100.0), Portion::new(0.0, 40.0)).unwrap();
        assert_eq!(rest, vec![Portion::new(40.0, 100.0)]);
        let (_, rest) = divide_portion(Portion::new(0.0, 100.0), Portion::new(0.0, 100.0)).unwrap();
        assert!(rest.is_empty());
    }

    #[test]
    fn divide_portion_rejects_uncontained_windows() {
        let err = divide_portion(Portion::new(10.0, 50.0), Portion::new(0.0, 20.0)).unwrap_err();
        assert!(matches!(err, CoralError::NotContained { .. }));
        assert!(divide_portion(Portion::new(10.0, 50.0), Portion::new(40.0, 60.0)).is_err());
    }

    proptest! {
        /// Dividing conserves time exactly: claimed + remainders tile the
        /// original portion with no gaps, overlaps, or leaks.
        #[test]
        fn divide_portion_conserves_time(
            start in 0.0f64..1000.0,
            len in 0.1f64..500.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let portion = Portion::new(start, start + len);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let needed = Portion::new(start + lo * len, start + hi * len);
            let (claimed, rest) = divide_portion(portion, needed).unwrap();
            let total = claimed.len_ms() + rest.iter().map(Portion::len_ms).sum::<f64>();
            prop_assert!((total - portion.len_ms()).abs() < 1e-6);
            for r in &rest {
                prop_assert!(portion.contains(r));
                prop_assert!(r.end_ms <= claimed.start_ms + 1e-9 || r.start_ms >= claimed.end_ms - 1e-9);
            }
        }
    }

    // ── coral_place conditions ──────────────────────────────────────────

    #[test]
    fn first_fit_scans_streams_in_order_and_divides() {
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut state = CoralState::new(&cluster);

        let (key, portion) = state.coral_place(&need("a", "server", (0.0, 40.0), 0.5, 100.0)).unwrap();
        assert_eq!((key.stream, portion.start_ms, portion.end_ms), (0, 0.0, 40.0));
        // Stream 0's duty locks at 100 and its free list is [40, 100).
        let ss = state.stream(&key).unwrap();
        assert_eq!(ss.duty_cycle_ms, 100.0);
        assert_eq!(ss.free, vec![Portion::new(40.0, 100.0)]);

        // A second instance wanting the same window lands on stream 1.
        let mut n2 = need("a", "server", (0.0, 40.0), 0.5, 100.0);
        n2.key.instance_number = 1;
        let (key2, _) = state.coral_place(&n2).unwrap();
        assert_eq!(key2.stream, 1);

        // A later window fits back into stream 0's tail.
        let n3 = need("b", "server", (40.0, 70.0), 0.3, 100.0);
        let (key3, portion3) = state.coral_place(&n3).unwrap();
        assert_eq!(key3.stream, 0);
        assert_eq!(portion3, Portion::new(40.0, 70.0));
        audit(&state, &cluster);
    }

    #[test]
    fn sliding_windows_pack_one_stream_instead_of_spilling() {
        // Two anchor-free instances of width 0.7 both ask for a 30 ms
        // window. Fixed anchoring would collide at [0, 30) and spill the
        // second to stream 1, where 0.7 + 0.7 busts the utilization cap.
        // Sliding lets it take [30, 60) on stream 0 instead.
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut state = CoralState::new(&cluster);

        let mut a = need("a", "server", (0.0, 30.0), 0.7, 100.0);
        a.slide = true;
        let (ka, pa) = state.coral_place(&a).unwrap();
        assert_eq!((ka.stream, pa), (0, Portion::new(0.0, 30.0)));

        let mut b = need("b", "server", (0.0, 30.0), 0.7, 100.0);
        b.slide = true;
        let (kb, pb) = state.coral_place(&b).unwrap();
        assert_eq!((kb.stream, pb), (0, Portion::new(30.0, 60.0)));

        // A third 50 ms root finds stream 0's tail too short ([60, 100)
        // is only 40 ms) and the width sum forbids stream 1: unplaced.
        let mut c = need("c", "server", (0.0, 50.0), 0.7, 100.0);
        c.slide = true;
        let err = state.coral_place(&c).unwrap_err();
        assert!(err.reason.contains("limits"), "{}", err.reason);

        // Oversized sliding windows are rejected outright.
        let mut d = need("d", "server", (0.0, 120.0), 0.1, 100.0);
        d.slide = true;
        let err = state.coral_place(&d).unwrap_err();
        assert!(err.reason.contains("duty cycle"), "{}", err.reason);
        audit(&state, &cluster);
    }

    #[test]
    fn memory_condition_counts_stream_maximum_not_sum() {
        // GPU memory 330: two instances (weight 100 each) sharing stream 0
        // need 200 + max(10, 50) = 250. A naive sum (260) would also fit
        // here, so pin the boundary with a third instance: weight 100 on
        // stream 1 brings the total to 300 + 50 + 10 = 360 > 330 and must
        // be rejected, while the same instance on stream 0 (time-shared,
        // 300 + max(10,50,10) = 350... still over) — shrink to see the
        // max rule pass where the sum fails: capacity 355 admits stream 0
        // (350) but stream 1 arrival (360) still fails.
        let cluster = cluster(2, 355.0, 1.0);
        let mut state = CoralState::new(&cluster);
        let mut a = need("a", "server", (0.0, 30.0), 0.3, 100.0);
        a.intermediate_mib = 10.0;
        state.coral_place(&a).unwrap();
        let mut b = need("b", "server", (30.0, 60.0), 0.3, 100.0);
        b.intermediate_mib = 50.0;
        let (kb, _) = state.coral_place(&b).unwrap();
        assert_eq!(kb.stream, 0, "time-shared stream charges max intermediate");

        // Third instance asks for stream 0's tail: 300 + max(10,50,10)=350
        // fits in 355. The same instance forced to stream 1 (fresh lane,
        // intermediates now 50 + 10) would need 360 and fail — verify by
        // filling stream 0 first.
        let mut c = need("c", "server", (60.0, 90.0), 0.3, 100.0);
        c.intermediate_mib = 10.0;
        let (kc, _) = state.coral_place(&c).unwrap();
        assert_eq!(kc.stream, 0);

        let mut d = need("d", "server", (0.0, 30.0), 0.3, 100.0);
        d.intermediate_mib = 10.0;
        // Only stream 1 has that window free; 400 weight + 50 + 10 > 355.
        let err = state.coral_place(&d).unwrap_err();
        assert!(err.reason.contains("memory"), "{}", err.reason);
        audit(&state, &cluster);
    }

    #[test]
    fn utilization_condition_sums_stream_maxima() {
        // max_util 0.8: widths 0.6 and 0.5 time-share stream 0 fine
        // (max 0.6), but a 0.3-wide instance on stream 1 would make
        // 0.6 + 0.3 > 0.8 and is rejected.
        let cluster = cluster(2, 100_000.0, 0.8);
        let mut state = CoralState::new(&cluster);
        state.coral_place(&need("a", "server", (0.0, 30.0), 0.6, 100.0)).unwrap();
        let (k2, _) = state.coral_place(&need("b", "server", (30.0, 60.0), 0.5, 100.0)).unwrap();
        assert_eq!(k2.stream, 0);

        let err = state.coral_place(&need("c", "server", (0.0, 30.0), 0.3, 100.0)).unwrap_err();
        assert!(err.reason.contains("utilization"), "{}", err.reason);

        // A 0.2-wide instance squeaks in (0.6 + 0.2 = 0.8).
        let (k3, _) = state.coral_place(&need("d", "server", (0.0, 30.0), 0.2, 100.0)).unwrap();
        assert_eq!(k3.stream, 1);
        audit(&state, &cluster);
    }

    #[test]
    fn duty_cycle_compatibility_gates_streams() {
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut state = CoralState::new(&cluster);
        // Stream 0 locks at duty 100.
        state.coral_place(&need("a", "server", (0.0, 30.0), 0.2, 100.0)).unwrap();
        // duty 150 ≥ 100: may join stream 0 (and will run at the stream's
        // faster period).
        let (k, _) = state.coral_place(&need("b", "server", (30.0, 60.0), 0.2, 150.0)).unwrap();
        assert_eq!(k.stream, 0);
        // duty 80 < 100: must not join stream 0; lands on stream 1.
        let (k, _) = state.coral_place(&need("c", "server", (0.0, 30.0), 0.2, 80.0)).unwrap();
        assert_eq!(k.stream, 1);
        // A window beyond the duty cycle is rejected outright.
        let err = state.coral_place(&need("d", "server", (90.0, 130.0), 0.2, 100.0)).unwrap_err();
        assert!(err.reason.contains("duty"), "{}", err.reason);
        audit(&state, &cluster);
    }

    #[test]
    fn remove_assignment_restores_pristine_streams() {
        let cluster = cluster(2, 100_000.0, 1.0);
        let pristine = CoralState::new(&cluster);
        let mut state = pristine.clone();

        let n = need("a", "server", (10.0, 40.0), 0.5, 100.0);
        state.coral_place(&n).unwrap();
        assert_ne!(state, pristine);
        let removed = state.remove_assignment(&n.key);
        assert!(removed.is_some());
        // Exact round trip: duty unset again, free list back to [0, inf).
        assert_eq!(state, pristine);

        // Removing one of two keeps the stream's duty and coalesces.
        let a = need("a", "server", (0.0, 30.0), 0.5, 100.0);
        let mut b = need("b", "server", (30.0, 60.0), 0.5, 100.0);
        b.key.model_id = "b".into();
        state.coral_place(&a).unwrap();
        state.coral_place(&b).unwrap();
        state.remove_assignment(&a.key);
        let sk = StreamKey { device_id: "server".into(), gpu_id: "g0".into(), stream: 0 };
        let ss = state.stream(&sk).unwrap();
        assert_eq!(ss.duty_cycle_ms, 100.0);
        assert_eq!(ss.free, vec![Portion::new(0.0, 30.0), Portion::new(60.0, 100.0)]);
        audit(&state, &cluster);
    }

    proptest! {
        /// Random place/remove sequences keep every structural invariant.
        #[test]
        fn place_remove_sequences_stay_consistent(ops in proptest::collection::vec(
            (0.0f64..70.0, 5.0f64..30.0, 0.05f64..0.4, 0u8..3), 1..40,
        )) {
            let cluster = cluster(3, 2_000.0, 1.0);
            let mut state = CoralState::new(&cluster);
            let mut placed: Vec<InstanceKey> = Vec::new();
            for (i, (start, len, width, action)) in ops.into_iter().enumerate() {
                if action == 2 && !placed.is_empty() {
                    let key = placed.remove(i % placed.len());
                    state.remove_assignment(&key);
                } else {
                    let mut n = need(&format!("m{i}"), "server", (start, (start + len).min(100.0)), width, 100.0);
                    n.key.instance_number = i as u32;
                    n.weight_mib = 30.0;
                    n.intermediate_mib = 5.0;
                    if let Ok(_) = state.coral_place(&n) {
                        placed.push(n.key.clone());
                    }
                }
                audit(&state, &cluster);
            }
        }
    }

    // ── coral_schedule geometry ─────────────────────────────────────────

    fn plan_with(
        pipeline: &PipelineSpec,
        cfgs: &[(&str, &str, u32, u32)], // (model, device, batch, instances)
    ) -> PipelinePlan {
        let mut plan = PipelinePlan::new(pipeline.pipeline_id.clone());
        for (model, device, bz, n) in cfgs {
            let list = (0..*n)
                .map(|k| InstanceConfig {
                    model_id: (*model).into(),
                    instance_number: k,
                    batch_size: *bz,
                    device_id: (*device).into(),
                    gpu_id: "g0".into(),
                    placement: None,
                })
                .collect();
            plan.instances.insert((*model).into(), list);
        }
        plan
    }

    #[test]
    fn chains_lay_out_end_to_end_with_io_offsets() {
        // A runs [0, 40) on the server. B runs on edge0; its 10 kB input
        // crosses a 1 MB/s link in 10 ms, so B owns [50, 70) there.
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut profiles = ProfileSet::default();
        profiles.models.insert("a".into(), profile("a", 100.0, 10.0, 40.0, 0.5, 10_000.0));
        // B's latency on agx is latency*2 = 20 ms.
        profiles.models.insert("b".into(), profile("b", 100.0, 10.0, 10.0, 0.2, 10_000.0));
        let pipeline = PipelineSpec {
            pipeline_id: "p".into(),
            models: vec!["a".into(), "b".into()],
            edges: vec![("a".into(), "b".into())],
            slo_ms: 200.0,
            source_device: "server".into(),
        };
        let mut bw = BandwidthSnapshot::default();
        bw.set("server", "edge0", 1_000_000.0);
        let mut plans = vec![plan_with(&pipeline, &[("a", "server", 1, 1), ("b", "edge0", 1, 1)])];
        let state = coral_schedule(&mut plans, &[pipeline], &cluster, &profiles, &bw);

        let pa = plans[0].primary("a").unwrap().placement.as_ref().unwrap();
        assert_eq!((pa.start_ms, pa.end_ms, pa.duty_cycle_ms), (0.0, 40.0, 100.0));
        let pb = plans[0].primary("b").unwrap().placement.as_ref().unwrap();
        assert!((pb.start_ms - 50.0).abs() < 1e-9, "{}", pb.start_ms);
        assert!((pb.end_ms - 70.0).abs() < 1e-9, "{}", pb.end_ms);
        assert!(plans[0].unplaced.is_empty());
        audit(&state, &cluster);
    }

    #[test]
    fn same_device_chains_share_a_stream_back_to_back() {
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut profiles = ProfileSet::default();
        profiles.models.insert("a".into(), profile("a", 100.0, 10.0, 40.0, 0.5, 10_000.0));
        profiles.models.insert("b".into(), profile("b", 100.0, 10.0, 20.0, 0.2, 10_000.0));
        let pipeline = PipelineSpec {
            pipeline_id: "p".into(),
            models: vec!["a".into(), "b".into()],
            edges: vec![("a".into(), "b".into())],
            slo_ms: 200.0,
            source_device: "server".into(),
        };
        let mut plans = vec![plan_with(&pipeline, &[("a", "server", 1, 1), ("b", "server", 1, 1)])];
        let state = coral_schedule(
            &mut plans,
            &[pipeline],
            &cluster,
            &profiles,
            &BandwidthSnapshot::default(),
        );
        let pa = plans[0].primary("a").unwrap().placement.as_ref().unwrap();
        let pb = plans[0].primary("b").unwrap().placement.as_ref().unwrap();
        assert_eq!(pa.stream_index, pb.stream_index);
        // B starts right after A plus the tiny loopback hop (0.001 ms).
        assert!((pb.start_ms - 40.001).abs() < 1e-9, "{}", pb.start_ms);
        audit(&state, &cluster);
    }

    #[test]
    fn instance_rounds_are_fair_under_scarcity() {
        // Both models want the same [0, 60) window and the GPU has three
        // streams. Greedy per-model placement would hand X (3 instances)
        // all three lanes and starve Y; fair rounds place X#0, Y#0, X#1
        // and leave X#2 without a lane.
        let cluster = ClusterSpec {
            devices: vec![DeviceSpec {
                device_id: "server".into(),
                device_class: "server_gpu".into(),
                gpus: vec![GpuSpec {
                    gpu_id: "g0".into(),
                    mem_capacity_mib: 100_000.0,
                    max_util: 1.0,
                    stream_count: 3,
                }],
                intra_bw_bytes_per_sec: 1e10,
            }],
            server_device: "server".into(),
        };
        let mut profiles = ProfileSet::default();
        profiles.models.insert("x".into(), profile("x", 10.0, 1.0, 60.0, 0.2, 1_000.0));
        profiles.models.insert("y".into(), profile("y", 10.0, 1.0, 60.0, 0.2, 1_000.0));
        let px = PipelineSpec {
            pipeline_id: "px".into(),
            models: vec!["x".into()],
            edges: vec![],
            slo_ms: 200.0,
            source_device: "server".into(),
        };
        let py = PipelineSpec {
            pipeline_id: "py".into(),
            models: vec!["y".into()],
            edges: vec![],
            slo_ms: 200.0,
            source_device: "server".into(),
        };
        let mut plans = vec![
            plan_with(&px, &[("x", "server", 1, 3)]),
            plan_with(&py, &[("y", "server", 1, 1)]),
        ];
        let state = coral_schedule(
            &mut plans,
            &[px, py],
            &cluster,
            &profiles,
            &BandwidthSnapshot::default(),
        );
        assert_eq!(plans[0].instances_of("x").len(), 2);
        assert_eq!(plans[1].instances_of("y").len(), 1, "Y keeps its copy");
        // X#0 took stream 0, Y#0 stream 1, X#1 stream 2; X#2 fit nowhere.
        assert_eq!(plans[1].primary("y").unwrap().placement.as_ref().unwrap().stream_index, 1);
        assert_eq!(plans[0].unplaced.len(), 1);
        assert_eq!(plans[0].unplaced[0].instance_number, 2);
        audit(&state, &cluster);
    }

    #[test]
    fn edge_overflow_spills_to_the_server_instead_of_stalling() {
        // Two single-model pipelines assigned to the edge, each 0.6 wide
        // there (the fixture doubles widths on agx): together they bust the
        // edge GPU's 1.0 width budget, so the second re-homes to the
        // server, where the model is 0.3 wide and twice as fast.
        let cluster = cluster(4, 100_000.0, 1.0);
        let mut profiles = ProfileSet::default();
        profiles.models.insert("a".into(), profile("a", 100.0, 10.0, 30.0, 0.3, 10_000.0));
        profiles.models.insert("b".into(), profile("b", 100.0, 10.0, 30.0, 0.3, 10_000.0));
        let pa = PipelineSpec {
            pipeline_id: "pa".into(),
            models: vec!["a".into()],
            edges: vec![],
            slo_ms: 200.0,
            source_device: "edge0".into(),
        };
        let pb = PipelineSpec {
            pipeline_id: "pb".into(),
            models: vec!["b".into()],
            edges: vec![],
            slo_ms: 200.0,
            source_device: "edge0".into(),
        };
        let mut plans = vec![
            plan_with(&pa, &[("a", "edge0", 1, 1)]),
            plan_with(&pb, &[("b", "edge0", 1, 1)]),
        ];
        let state = coral_schedule(
            &mut plans,
            &[pa.clone(), pb.clone()],
            &cluster,
            &profiles,
            &BandwidthSnapshot::default(),
        );
        let a = plans[0].primary("a").unwrap();
        assert_eq!(a.device_id, "edge0");
        assert!(a.placement.is_some());
        let b = plans[1].primary("b").unwrap();
        assert_eq!(b.device_id, "server", "refused by the edge, welcomed by the server");
        let pb_placement = b.placement.as_ref().unwrap();
        assert_eq!((pb_placement.start_ms, pb_placement.end_ms), (0.0, 30.0));
        assert!(plans[0].unplaced.is_empty() && plans[1].unplaced.is_empty());
        audit(&state, &cluster);

        // When the server refuses too, the instance stays unplaced and the
        // reason records both attempts.
        let tight = self::cluster(2, 100_000.0, 0.1);
        let mut plans = vec![
            plan_with(&pa, &[("a", "edge0", 1, 1)]),
            plan_with(&pb, &[("b", "edge0", 1, 1)]),
        ];
        coral_schedule(&mut plans, &[pa, pb], &tight, &profiles, &BandwidthSnapshot::default());
        assert_eq!(plans[1].unplaced.len(), 1);
        assert!(
            plans[1].unplaced[0].reason.contains("server fallback"),
            "{}",
            plans[1].unplaced[0].reason
        );
    }

    #[test]
    fn spilled_children_anchor_across_the_uplink() {
        // a -> b, both handed to the edge. b's window behind a (60 + 60 ms)
        // overruns the 100 ms duty cycle there, so it spills to the server;
        // its anchor then includes the 10 ms uplink hop for a's outputs.
        let cluster = cluster(4, 100_000.0, 1.0);
        let mut profiles = ProfileSet::default();
        profiles.models.insert("a".into(), profile("a", 100.0, 10.0, 30.0, 0.3, 10_000.0));
        profiles.models.insert("b".into(), profile("b", 100.0, 10.0, 30.0, 0.3, 10_000.0));
        let pipeline = PipelineSpec {
            pipeline_id: "p".into(),
            models: vec!["a".into(), "b".into()],
            edges: vec![("a".into(), "b".into())],
            slo_ms: 200.0,
            source_device: "edge0".into(),
        };
        let mut bw = BandwidthSnapshot::default();
        bw.set("server", "edge0", 1_000_000.0);
        let mut plans = vec![plan_with(
            &pipeline,
            &[("a", "edge0", 1, 1), ("b", "edge0", 1, 1)],
        )];
        let state = coral_schedule(&mut plans, &[pipeline], &cluster, &profiles, &bw);

        let b = plans[0].primary("b").unwrap();
        assert_eq!(b.device_id, "server");
        let placement = b.placement.as_ref().unwrap();
        assert!((placement.start_ms - 70.0).abs() < 1e-9, "{}", placement.start_ms);
        assert!((placement.end_ms - 100.0).abs() < 1e-9, "{}", placement.end_ms);
        assert!(plans[0].unplaced.is_empty());
        audit(&state, &cluster);
    }

    #[test]
    fn placement_report_captures_layout_and_unplaced() {
        let cluster = cluster(2, 100_000.0, 1.0);
        let mut profiles = ProfileSet::default();
        profiles.models.insert("a".into(), profile("a", 100.0, 10.0, 40.0, 0.5, 10_000.0));
        let pipeline = PipelineSpec {
            pipeline_id: "p".into(),
            models: vec!["a".into()],
            edges: vec![],
            slo_ms: 200.0,
            source_device: "server".into(),
        };
        let mut plans = vec![plan_with(&pipeline, &[("a", "server", 1, 1)])];
        let state = coral_schedule(
            &mut plans,
            std::slice::from_ref(&pipeline),
            &cluster,
            &profiles,
            &BandwidthSnapshot::default(),
        );
        let report = placement_report(&state, &plans);
        let gpu = &report.gpus["server/g0"];
        assert_eq!(gpu.streams[0].portions.len(), 1);
        assert_eq!(gpu.streams[0].portions[0].model_id, "a");
        assert_eq!(gpu.streams[0].free, vec![(40.0, 100.0)]);
        assert!((gpu.weight_mib - 100.0).abs() < 1e-12);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"server/g0\""));
    }
}
