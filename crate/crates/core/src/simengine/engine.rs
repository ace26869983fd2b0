//! The deterministic discrete-event simulator: drives arrival traces
//! through scheduled pipelines and measures what each policy actually
//! delivers.
//!
//! # Execution model
//!
//! * **Queries** are units with a birth time and a deadline (birth + SLO).
//!   A source arrival sends one unit per query over the uplink to the
//!   first model; between stages a batch's output moves as one
//!   input-sized blob (batching amortizes the link, matching the
//!   planner's per-query latency accounting).
//! * **Batches** execute in the latency profiled for the *configured*
//!   batch size regardless of fill (static tensor shapes), so a stream
//!   portion is never overrun by its own batch.
//! * **Portion-placed instances** dispatch at their portion's start every
//!   duty cycle, all cycles phase-anchored at t = 0. Queue-driven
//!   instances dispatch when a full batch is queued or the head of the
//!   queue has waited out the stage's fill timeout (half the SLO minus
//!   worst-case downstream latency).
//! * **Contention**: when concurrent batch widths on a GPU exceed its
//!   utilization budget, every newly started batch stretches by the
//!   overload factor and is counted as inflated. Portion placement keeps
//!   concurrent widths within budget by construction, so temporal
//!   policies see zero inflation.
//! * **Drops are lazy**: expired units are discarded only when an
//!   instance would otherwise batch them.
//! * **Links** are FIFO per direction; a link at zero bandwidth parks
//!   transfers until a bandwidth update revives it.
//!
//! Scheduler rounds re-plan from measured per-stage rates and burstiness
//! (round zero bootstraps from the trace prefix so every policy starts
//! from the same picture). Model queues survive redeployments; in-flight
//! batches finish under the configuration that started them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::autoscaler::{
    apply_scale_down, apply_scale_up, evaluate, ScaleAction, ScalerConfig, ScalerState,
};
use crate::coral::{placement_report, CoralState, PlacementReport};
use crate::cwd::ModelStatsMap;
use crate::domain::{
    ClusterSpec, DeviceId, GpuKey, ModelId, PipelineId, PipelinePlan, PipelineSpec,
    PortionPlacement, ProfileSet,
};
use crate::domain::BandwidthSnapshot;
use crate::policies::{plan_round, RoundInputs, SchedulingPolicy};
use crate::simengine::event::{EventKind, EventQueue, Unit};
use crate::simengine::metrics::{
    percentile, FlowCounters, LatencySummary, PipelineReport, SimReport, TimeseriesRow,
};
use crate::traces::{window_stats, ArrivalTrace, BandwidthTrace, RateStats};

const EPS: f64 = 1e-9;

/// Run-level knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub duration_ms: f64,
    /// Interval between full scheduler rounds.
    pub scheduler_period_ms: f64,
    /// Base seed for seeded policy searches (and recorded in the report).
    pub seed: u64,
    pub telemetry_bucket_ms: f64,
    /// Model GPU contention (stretch overloaded batches)?
    pub interference: bool,
    /// How hard oversubscription bites: a batch dispatched into width
    /// overload `u > max_util` is stretched by
    /// `1 + interference_scale * (u / max_util - 1)`. At 1.0 the stretch is
    /// exactly proportional to the oversubscription.
    pub interference_scale: f64,
    pub scaler: ScalerConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_ms: 60_000.0,
            scheduler_period_ms: 10_000.0,
            seed: 1,
            telemetry_bucket_ms: 1_000.0,
            interference: true,
            interference_scale: 1.0,
            scaler: ScalerConfig::default(),
        }
    }
}

/// Everything one simulation run consumes.
pub struct SimInputs<'a> {
    pub policy: &'a SchedulingPolicy,
    pub cluster: &'a ClusterSpec,
    pub pipelines: &'a [PipelineSpec],
    pub profiles: &'a ProfileSet,
    /// Per-pipeline source arrival traces.
    pub arrivals: &'a BTreeMap<PipelineId, ArrivalTrace>,
    /// Per-link bandwidth traces, keyed by unordered device pair.
    pub bandwidth: &'a BTreeMap<(DeviceId, DeviceId), BandwidthTrace>,
    pub config: &'a SimConfig,
}

/// A run's complete result.
#[derive(Debug, Clone, Serialize)]
pub struct SimOutput {
    pub report: SimReport,
    pub timeseries: Vec<TimeseriesRow>,
    /// Final stream layout (empty streams for queue-driven policies).
    pub placement: PlacementReport,
    pub log: Vec<String>,
}

// ── Internal runtime state ──────────────────────────────────────────────

#[derive(Debug, Clone)]
struct DeployedInstance {
    number: u32,
    device_id: DeviceId,
    gpu: GpuKey,
    batch_size: u32,
    /// Batch execution time at the configured size; infinite when the
    /// profile lacks the entry (the instance then never dispatches).
    exec_ms: f64,
    width: f64,
    intermediate_mib: f64,
    weight_mib: f64,
    placement: Option<PortionPlacement>,
    busy: bool,
    /// Invalidates queued portion-dispatch chains after redeploys.
    token: u64,
}

/// Measured arrivals within the current stats window.
#[derive(Debug, Clone, Copy, Default)]
struct WindowStats {
    count: u64,
    gaps: u64,
    gap_sum: f64,
    gap_sumsq: f64,
    last_t: Option<f64>,
}

impl WindowStats {
    fn observe(&mut self, t: f64) {
        if let Some(last) = self.last_t {
            let gap = (t - last).max(0.0);
            self.gaps += 1;
            self.gap_sum += gap;
            self.gap_sumsq += gap * gap;
        }
        self.last_t = Some(t);
        self.count += 1;
    }

    fn rate_qps(&self, window_ms: f64) -> f64 {
        if window_ms <= 0.0 {
            return 0.0;
        }
        self.count as f64 / window_ms * 1000.0
    }

    /// Coefficient of variation of inter-arrival gaps.
    fn cov(&self) -> f64 {
        if self.gaps < 2 {
            return 0.0;
        }
        let mean = self.gap_sum / self.gaps as f64;
        if mean <= 0.0 {
            return 0.0;
        }
        let var = (self.gap_sumsq / self.gaps as f64 - mean * mean).max(0.0);
        var.sqrt() / mean
    }

    /// Clears the window but keeps the last timestamp so the next window's
    /// first gap is well defined.
    fn reset(&mut self) {
        let last = self.last_t;
        *self = Self { last_t: last, ..Self::default() };
    }
}

#[derive(Debug, Default)]
struct StageRuntime {
    instances: Vec<DeployedInstance>,
    children: Vec<ModelId>,
    fanout: f64,
    fill_timeout_ms: f64,
    queue: VecDeque<Unit>,
    /// Fractional fanout carry per child edge.
    carry: BTreeMap<ModelId, f64>,
    epoch: u64,
    timer_pending: bool,
    stats: WindowStats,
    scaler_count: u64,
    dropped: u64,
}

#[derive(Debug, Clone)]
struct RunningBatch {
    pipeline_id: PipelineId,
    model_id: ModelId,
    instance_number: u32,
    token: u64,
    device_id: DeviceId,
    gpu: GpuKey,
    units: Vec<Unit>,
    width: f64,
    intermediate_mib: f64,
}

#[derive(Debug, Default)]
struct GpuRuntime {
    max_util: f64,
    resident_weight_mib: f64,
    executing_mem_mib: f64,
    running_width: f64,
    peak_mib: f64,
}

#[derive(Debug)]
struct Parked {
    pipeline_id: PipelineId,
    model_id: ModelId,
    units: Vec<Unit>,
    size_bytes: f64,
}

#[derive(Debug, Default)]
struct LinkDir {
    busy_until_ms: f64,
    parked: VecDeque<Parked>,
}

#[derive(Debug, Default)]
struct PipeAcc {
    counters: FlowCounters,
    latencies: Vec<f64>,
}

#[derive(Debug, Default)]
struct Bucket {
    effective: u64,
    total: u64,
    dropped: u64,
    latencies: Vec<f64>,
}

struct Engine<'a> {
    policy: &'a SchedulingPolicy,
    cluster: &'a ClusterSpec,
    pipelines: &'a [PipelineSpec],
    profiles: &'a ProfileSet,
    arrivals: &'a BTreeMap<PipelineId, ArrivalTrace>,
    config: &'a SimConfig,
    pipe_by_id: BTreeMap<String, &'a PipelineSpec>,

    events: EventQueue,
    now: f64,

    stages: BTreeMap<(PipelineId, ModelId), StageRuntime>,
    source_stats: BTreeMap<PipelineId, WindowStats>,
    links: BTreeMap<(DeviceId, DeviceId), LinkDir>,
    current_bw: BandwidthSnapshot,
    gpus: BTreeMap<GpuKey, GpuRuntime>,
    batches: BTreeMap<u64, RunningBatch>,
    next_batch_id: u64,
    next_token: u64,

    plans: Vec<PipelinePlan>,
    coral: Option<CoralState>,
    scaler_state: ScalerState,

    // Metrics.
    per_pipe: BTreeMap<PipelineId, PipeAcc>,
    all_latencies: Vec<f64>,
    in_transfer_units: u64,
    parked_units: u64,
    inflated_batches: u64,
    total_batches: u64,
    rounds: u32,
    scale_ups: u32,
    scale_downs: u32,
    dropped_by_stage: BTreeMap<String, u64>,
    peak_total_mib: f64,

    bucket_start: f64,
    bucket: Bucket,
    rows: Vec<TimeseriesRow>,
    log: Vec<String>,
    warned_links: BTreeSet<(DeviceId, DeviceId)>,
}

/// Runs one policy over one scenario, deterministically.
pub fn run_simulation(inputs: &SimInputs) -> SimOutput {
    let mut engine = Engine::new(inputs);
    engine.prime(inputs.bandwidth);
    engine.run();
    engine.finish()
}

impl<'a> Engine<'a> {
    fn new(inputs: &SimInputs<'a>) -> Self {
        let pipe_by_id =
            inputs.pipelines.iter().map(|p| (p.pipeline_id.clone(), p)).collect();
        let mut gpus = BTreeMap::new();
        for key in inputs.cluster.gpu_keys() {
            let spec = inputs.cluster.gpu(&key).expect("key enumerated from cluster");
            gpus.insert(key, GpuRuntime { max_util: spec.max_util, ..GpuRuntime::default() });
        }
        let mut per_pipe = BTreeMap::new();
        for p in inputs.pipelines {
            per_pipe.insert(p.pipeline_id.clone(), PipeAcc::default());
        }
        Self {
            policy: inputs.policy,
            cluster: inputs.cluster,
            pipelines: inputs.pipelines,
            profiles: inputs.profiles,
            arrivals: inputs.arrivals,
            config: inputs.config,
            pipe_by_id,
            events: EventQueue::default(),
            now: 0.0,
            stages: BTreeMap::new(),
            source_stats: BTreeMap::new(),
            links: BTreeMap::new(),
            current_bw: BandwidthSnapshot::default(),
            gpus,
            batches: BTreeMap::new(),
            next_batch_id: 0,
            next_token: 0,
            plans: Vec::new(),
            coral: None,
            scaler_state: ScalerState::default(),
            per_pipe,
            all_latencies: Vec::new(),
            in_transfer_units: 0,
            parked_units: 0,
            inflated_batches: 0,
            total_batches: 0,
            rounds: 0,
            scale_ups: 0,
            scale_downs: 0,
            dropped_by_stage: BTreeMap::new(),
            peak_total_mib: 0.0,
            bucket_start: 0.0,
            bucket: Bucket::default(),
            rows: Vec::new(),
            log: Vec::new(),
            warned_links: BTreeSet::new(),
        }
    }

    /// Seeds the event queue: bandwidth samples, source arrivals, the
    /// first scheduler round, and (for autoscaling policies) the first
    /// scaler tick.
    fn prime(&mut self, bandwidth: &BTreeMap<(DeviceId, DeviceId), BandwidthTrace>) {
        for ((a, b), trace) in bandwidth {
            for sample in &trace.samples {
                if sample.t_ms <= self.config.duration_ms + EPS {
                    self.events.push(
                        sample.t_ms.max(0.0),
                        EventKind::BandwidthUpdate {
                            a: a.clone(),
                            b: b.clone(),
                            bytes_per_sec: sample.bytes_per_sec,
                        },
                    );
                }
            }
        }
        for (pipeline_id, trace) in self.arrivals {
            if !self.pipe_by_id.contains_key(pipeline_id) {
                continue;
            }
            for ev in &trace.events {
                if ev.t_ms <= self.config.duration_ms + EPS {
                    self.events.push(
                        ev.t_ms,
                        EventKind::SourceArrival {
                            pipeline_id: pipeline_id.clone(),
                            count: ev.count,
                        },
                    );
                }
            }
        }
        self.events.push(0.0, EventKind::SchedulerRound { index: 0 });
        if self.policy.autoscaling {
            self.events.push(self.config.scaler.tick_ms, EventKind::ScalerTick);
        }
    }

    fn run(&mut self) {
        while let Some((t, kind)) = self.events.pop() {
            if t > self.config.duration_ms + EPS {
                break;
            }
            self.flush_buckets_until(t);
            self.now = t.max(self.now);
            match kind {
                EventKind::BandwidthUpdate { a, b, bytes_per_sec } => {
                    self.handle_bandwidth(a, b, bytes_per_sec)
                }
                EventKind::Deliver { pipeline_id, model_id, units } => {
                    self.handle_deliver(pipeline_id, model_id, units)
                }
                EventKind::BatchComplete { batch_id } => self.handle_batch_complete(batch_id),
                EventKind::SourceArrival { pipeline_id, count } => {
                    self.handle_arrival(pipeline_id, count)
                }
                EventKind::PortionDispatch { pipeline_id, model_id, instance_number, token } => {
                    self.handle_portion(pipeline_id, model_id, instance_number, token)
                }
                EventKind::FillTimeout { pipeline_id, model_id, epoch } => {
                    self.handle_fill_timeout(pipeline_id, model_id, epoch)
                }
                EventKind::ScalerTick => self.handle_scaler_tick(),
                EventKind::SchedulerRound { index } => self.handle_round(index),
            }
        }
        self.flush_buckets_until(self.config.duration_ms);
        self.flush_final_partial_bucket();
    }

    // ── Telemetry ───────────────────────────────────────────────────────

    fn current_mem_mib(&self) -> f64 {
        self.gpus.values().map(|g| g.resident_weight_mib + g.executing_mem_mib).sum()
    }

    fn queued_units(&self) -> u64 {
        self.stages.values().map(|s| s.queue.len() as u64).sum()
    }

    fn emit_row(&mut self, end_ms: f64, width_ms: f64) {
        let secs = width_ms / 1000.0;
        let mut lat = std::mem::take(&mut self.bucket.latencies);
        lat.sort_by(f64::total_cmp);
        self.rows.push(TimeseriesRow {
            time_ms: end_ms,
            effective_tput: if secs > 0.0 { self.bucket.effective as f64 / secs } else { 0.0 },
            total_tput: if secs > 0.0 { self.bucket.total as f64 / secs } else { 0.0 },
            dropped: self.bucket.dropped,
            p99_ms: percentile(&lat, 99.0),
            mem_mib: self.current_mem_mib(),
            queued_units: self.queued_units(),
        });
        self.bucket = Bucket::default();
    }

    fn flush_buckets_until(&mut self, t: f64) {
        let width = self.config.telemetry_bucket_ms;
        while self.bucket_start + width <= t + EPS
            && self.bucket_start + width <= self.config.duration_ms + EPS
        {
            let end = self.bucket_start + width;
            self.emit_row(end, width);
            self.bucket_start = end;
        }
    }

    fn flush_final_partial_bucket(&mut self) {
        let leftover = self.config.duration_ms - self.bucket_start;
        if leftover > EPS {
            self.emit_row(self.config.duration_ms, leftover);
            self.bucket_start = self.config.duration_ms;
        }
    }

    // ── Transfers ───────────────────────────────────────────────────────

    fn intra_delay_ms(&self, device_id: &str, size_bytes: f64) -> f64 {
        match self.cluster.device(device_id) {
            Some(d) if d.intra_bw_bytes_per_sec > 0.0 => {
                size_bytes / d.intra_bw_bytes_per_sec * 1000.0
            }
            _ => 0.0,
        }
    }

    /// Sends units from one device toward a model's queue; same-device
    /// moves take the intra-device hop, cross-device moves queue FIFO on
    /// the link (parking if it is down or unknown).
    fn send(
        &mut self,
        from: &str,
        to: &str,
        size_bytes: f64,
        pipeline_id: &str,
        model_id: &str,
        units: Vec<Unit>,
    ) {
        if units.is_empty() {
            return;
        }
        if from == to {
            let at = self.now + self.intra_delay_ms(from, size_bytes);
            self.in_transfer_units += units.len() as u64;
            self.events.push(
                at,
                EventKind::Deliver {
                    pipeline_id: pipeline_id.to_string(),
                    model_id: model_id.to_string(),
                    units,
                },
            );
            return;
        }
        let bw = self.current_bw.get(from, to);
        let dir = (from.to_string(), to.to_string());
        match bw {
            Some(bw) if bw > 0.0 => {
                let link = self.links.entry(dir).or_default();
                let start = self.now.max(link.busy_until_ms);
                let done = start + size_bytes / bw * 1000.0;
                link.busy_until_ms = done;
                self.in_transfer_units += units.len() as u64;
                self.events.push(
                    done,
                    EventKind::Deliver {
                        pipeline_id: pipeline_id.to_string(),
                        model_id: model_id.to_string(),
                        units,
                    },
                );
            }
            _ => {
                if bw.is_none() && self.warned_links.insert(dir.clone()) {
                    self.log.push(format!(
                        "[{:.0}] warning: no bandwidth defined for link {from}-{to}; transfers park",
                        self.now
                    ));
                }
                self.parked_units += units.len() as u64;
                self.links.entry(dir).or_default().parked.push_back(Parked {
                    pipeline_id: pipeline_id.to_string(),
                    model_id: model_id.to_string(),
                    units,
                    size_bytes,
                });
            }
        }
    }

    fn handle_bandwidth(&mut self, a: DeviceId, b: DeviceId, bytes_per_sec: f64) {
        self.current_bw.set(&a, &b, bytes_per_sec);
        if bytes_per_sec <= 0.0 {
            return;
        }
        for dir in [(a.clone(), b.clone()), (b, a)] {
            let Some(link) = self.links.get_mut(&dir) else { continue };
            let mut busy = link.busy_until_ms.max(self.now);
            let parked: Vec<Parked> = link.parked.drain(..).collect();
            for p in parked {
                let done = busy + p.size_bytes / bytes_per_sec * 1000.0;
                busy = done;
                self.parked_units -= p.units.len() as u64;
                self.in_transfer_units += p.units.len() as u64;
                self.events.push(
                    done,
                    EventKind::Deliver {
                        pipeline_id: p.pipeline_id,
                        model_id: p.model_id,
                        units: p.units,
                    },
                );
            }
            self.links.get_mut(&dir).unwrap().busy_until_ms = busy;
        }
    }

    // ── Arrivals and deliveries ─────────────────────────────────────────

    fn handle_arrival(&mut self, pipeline_id: PipelineId, count: u32) {
        let Some(pipeline) = self.pipe_by_id.get(&pipeline_id).copied() else { return };
        let root = pipeline.source().clone();
        let slo = pipeline.slo_ms;
        let source_device = pipeline.source_device.clone();
        let in_bytes = self.profiles.get(&root).map(|p| p.in_bytes).unwrap_or(0.0);
        let target = self
            .stages
            .get(&(pipeline_id.clone(), root.clone()))
            .and_then(|s| s.instances.first())
            .map(|i| i.device_id.clone())
            .unwrap_or_else(|| source_device.clone());

        let acc = self.per_pipe.entry(pipeline_id.clone()).or_default();
        acc.counters.source_arrivals += count as u64;
        let stats = self.source_stats.entry(pipeline_id.clone()).or_default();
        for _ in 0..count {
            stats.observe(self.now);
        }
        for _ in 0..count {
            let unit = Unit {
                birth_ms: self.now,
                deadline_ms: self.now + slo,
                enqueued_ms: self.now,
            };
            self.send(&source_device, &target, in_bytes, &pipeline_id, &root, vec![unit]);
        }
    }

    fn handle_deliver(&mut self, pipeline_id: PipelineId, model_id: ModelId, units: Vec<Unit>) {
        self.in_transfer_units = self.in_transfer_units.saturating_sub(units.len() as u64);
        let key = (pipeline_id.clone(), model_id.clone());
        // Entry handles pre-deployment deliveries: the provisional stage's
        // queue survives the first deploy.
        let stage = self.stages.entry(key).or_default();
        for mut u in units {
            u.enqueued_ms = self.now;
            stage.stats.observe(self.now);
            stage.scaler_count += 1;
            stage.queue.push_back(u);
        }
        self.try_dispatch(&pipeline_id, &model_id);
    }

    /// Drops expired units from the queue front; returns how many died.
    fn drop_expired(&mut self, pipeline_id: &str, model_id: &str) {
        let key = (pipeline_id.to_string(), model_id.to_string());
        let Some(stage) = self.stages.get_mut(&key) else { return };
        let mut dropped = 0u64;
        while let Some(front) = stage.queue.front() {
            if front.deadline_ms < self.now - EPS {
                stage.queue.pop_front();
                dropped += 1;
            } else {
                break;
            }
        }
        if dropped > 0 {
            stage.dropped += dropped;
            *self
                .dropped_by_stage
                .entry(format!("{pipeline_id}/{model_id}"))
                .or_insert(0) += dropped;
            let acc = self.per_pipe.entry(pipeline_id.to_string()).or_default();
            acc.counters.dropped_units += dropped;
            self.bucket.dropped += dropped;
        }
    }

    // ── Dispatch ────────────────────────────────────────────────────────

    /// Queue-driven dispatch: fills idle instances while a full batch is
    /// ready or the head of the queue has timed out; otherwise arms the
    /// stage's fill timer.
    fn try_dispatch(&mut self, pipeline_id: &str, model_id: &str) {
        loop {
            self.drop_expired(pipeline_id, model_id);
            let key = (pipeline_id.to_string(), model_id.to_string());
            let Some(stage) = self.stages.get_mut(&key) else { return };
            if stage.queue.is_empty() {
                return;
            }
            let Some(idx) = stage
                .instances
                .iter()
                .position(|i| i.placement.is_none() && !i.busy && i.exec_ms.is_finite())
            else {
                return;
            };
            let bz = stage.instances[idx].batch_size as usize;
            let head_waited = self.now - stage.queue.front().unwrap().enqueued_ms;
            let ready = stage.queue.len() >= bz;
            let timed_out = head_waited + EPS >= stage.fill_timeout_ms;
            if !(ready || timed_out) {
                if !stage.timer_pending {
                    stage.timer_pending = true;
                    let at = (stage.queue.front().unwrap().enqueued_ms + stage.fill_timeout_ms)
                        .max(self.now);
                    let epoch = stage.epoch;
                    self.events.push(
                        at,
                        EventKind::FillTimeout {
                            pipeline_id: pipeline_id.to_string(),
                            model_id: model_id.to_string(),
                            epoch,
                        },
                    );
                }
                return;
            }
            let n = stage.queue.len().min(bz);
            let units: Vec<Unit> = stage.queue.drain(..n).collect();
            stage.epoch += 1;
            let number = stage.instances[idx].number;
            self.start_batch(pipeline_id, model_id, number, units);
        }
    }

    fn handle_fill_timeout(&mut self, pipeline_id: PipelineId, model_id: ModelId, epoch: u64) {
        let key = (pipeline_id.clone(), model_id.clone());
        let Some(stage) = self.stages.get_mut(&key) else { return };
        stage.timer_pending = false;
        if stage.epoch != epoch {
            // Stale timer; re-evaluate (re-arms a correct one if needed).
            self.try_dispatch(&pipeline_id, &model_id);
            return;
        }
        self.drop_expired(&pipeline_id, &model_id);
        let Some(stage) = self.stages.get_mut(&key) else { return };
        if stage.queue.is_empty() {
            return;
        }
        let Some(idx) = stage
            .instances
            .iter()
            .position(|i| i.placement.is_none() && !i.busy && i.exec_ms.is_finite())
        else {
            return;
        };
        let bz = stage.instances[idx].batch_size as usize;
        let n = stage.queue.len().min(bz);
        let units: Vec<Unit> = stage.queue.drain(..n).collect();
        stage.epoch += 1;
        let number = stage.instances[idx].number;
        self.start_batch(&pipeline_id, &model_id, number, units);
        // More queued units (and instances) may be ready; fall through to
        // the regular path which also re-arms the timer.
        self.try_dispatch(&pipeline_id, &model_id);
    }

    fn handle_portion(
        &mut self,
        pipeline_id: PipelineId,
        model_id: ModelId,
        instance_number: u32,
        token: u64,
    ) {
        let key = (pipeline_id.clone(), model_id.clone());
        {
            let Some(stage) = self.stages.get_mut(&key) else { return };
            let Some(inst) = stage
                .instances
                .iter()
                .find(|i| i.number == instance_number && i.token == token)
            else {
                return; // Retired or redeployed; chain dies.
            };
            let duty = inst.placement.as_ref().map(|p| p.duty_cycle_ms).unwrap_or(0.0);
            if duty > 0.0 {
                let next = self.now + duty;
                if next <= self.config.duration_ms + EPS {
                    self.events.push(
                        next,
                        EventKind::PortionDispatch {
                            pipeline_id: pipeline_id.clone(),
                            model_id: model_id.clone(),
                            instance_number,
                            token,
                        },
                    );
                }
            }
        }
        self.drop_expired(&pipeline_id, &model_id);
        let Some(stage) = self.stages.get_mut(&key) else { return };
        let Some(inst) = stage
            .instances
            .iter()
            .find(|i| i.number == instance_number && i.token == token)
        else {
            return;
        };
        if inst.busy || !inst.exec_ms.is_finite() || stage.queue.is_empty() {
            return; // Idle cycle (or still executing after contention).
        }
        let n = stage.queue.len().min(inst.batch_size as usize);
        let units: Vec<Unit> = stage.queue.drain(..n).collect();
        stage.epoch += 1;
        self.start_batch(&pipeline_id, &model_id, instance_number, units);
    }

    fn start_batch(&mut self, pipeline_id: &str, model_id: &str, number: u32, units: Vec<Unit>) {
        let key = (pipeline_id.to_string(), model_id.to_string());
        let stage = self.stages.get_mut(&key).expect("dispatch on deployed stage");
        let inst = stage
            .instances
            .iter_mut()
            .find(|i| i.number == number)
            .expect("dispatch on existing instance");
        inst.busy = true;
        let (gpu, width, inter, base_exec, token, device_id) = (
            inst.gpu.clone(),
            inst.width,
            inst.intermediate_mib,
            inst.exec_ms,
            inst.token,
            inst.device_id.clone(),
        );

        let mut exec = base_exec;
        if let Some(g) = self.gpus.get_mut(&gpu) {
            if self.config.interference && g.max_util > 0.0 {
                let concurrent = g.running_width + width;
                if concurrent > g.max_util + 1e-6 {
                    exec *= 1.0
                        + self.config.interference_scale * (concurrent / g.max_util - 1.0);
                    self.inflated_batches += 1;
                }
            }
            g.running_width += width;
            g.executing_mem_mib += inter;
        }
        self.update_peaks();

        let id = self.next_batch_id;
        self.next_batch_id += 1;
        self.total_batches += 1;
        self.batches.insert(
            id,
            RunningBatch {
                pipeline_id: pipeline_id.to_string(),
                model_id: model_id.to_string(),
                instance_number: number,
                token,
                device_id,
                gpu,
                units,
                width,
                intermediate_mib: inter,
            },
        );
        self.events.push(self.now + exec, EventKind::BatchComplete { batch_id: id });
    }

    fn update_peaks(&mut self) {
        let mut total = 0.0;
        for g in self.gpus.values_mut() {
            let cur = g.resident_weight_mib + g.executing_mem_mib;
            if cur > g.peak_mib {
                g.peak_mib = cur;
            }
            total += cur;
        }
        if total > self.peak_total_mib {
            self.peak_total_mib = total;
        }
    }

    fn handle_batch_complete(&mut self, batch_id: u64) {
        let Some(batch) = self.batches.remove(&batch_id) else { return };
        if let Some(g) = self.gpus.get_mut(&batch.gpu) {
            g.running_width = (g.running_width - batch.width).max(0.0);
            g.executing_mem_mib = (g.executing_mem_mib - batch.intermediate_mib).max(0.0);
        }
        let key = (batch.pipeline_id.clone(), batch.model_id.clone());
        if let Some(stage) = self.stages.get_mut(&key) {
            if let Some(inst) = stage
                .instances
                .iter_mut()
                .find(|i| i.number == batch.instance_number && i.token == batch.token)
            {
                inst.busy = false;
            }
        }
        self.route_outputs(&batch);
        self.try_dispatch(&batch.pipeline_id, &batch.model_id);
    }

    fn route_outputs(&mut self, batch: &RunningBatch) {
        let key = (batch.pipeline_id.clone(), batch.model_id.clone());
        let (children, fanout) = match self.stages.get(&key) {
            Some(s) => (s.children.clone(), s.fanout),
            None => return,
        };
        if children.is_empty() {
            // Leaf: units complete here.
            let acc = self.per_pipe.entry(batch.pipeline_id.clone()).or_default();
            for u in &batch.units {
                let latency = self.now - u.birth_ms;
                acc.counters.completions += 1;
                self.bucket.total += 1;
                if self.now <= u.deadline_ms + EPS {
                    acc.counters.effective_completions += 1;
                    self.bucket.effective += 1;
                } else {
                    acc.counters.late_completions += 1;
                }
                acc.latencies.push(latency);
                self.all_latencies.push(latency);
                self.bucket.latencies.push(latency);
            }
            return;
        }
        for child in children {
            let mut emitted: Vec<Unit> = Vec::new();
            {
                let stage = self.stages.get_mut(&key).unwrap();
                let carry = stage.carry.entry(child.clone()).or_insert(0.0);
                for u in &batch.units {
                    *carry += fanout;
                    let n = carry.floor() as u64;
                    *carry -= n as f64;
                    for _ in 0..n {
                        emitted.push(*u);
                    }
                }
            }
            if emitted.is_empty() {
                continue;
            }
            let child_key = (batch.pipeline_id.clone(), child.clone());
            let to = self
                .stages
                .get(&child_key)
                .and_then(|s| s.instances.first())
                .map(|i| i.device_id.clone())
                .unwrap_or_else(|| batch.device_id.clone());
            let size = self.profiles.get(&child).map(|p| p.in_bytes).unwrap_or(0.0);
            self.send(&batch.device_id, &to, size, &batch.pipeline_id, &child, emitted);
        }
    }

    // ── Scaling ─────────────────────────────────────────────────────────

    fn handle_scaler_tick(&mut self) {
        let next = self.now + self.config.scaler.tick_ms;
        if next <= self.config.duration_ms + EPS {
            self.events.push(next, EventKind::ScalerTick);
        }
        if !self.policy.autoscaling || self.coral.is_none() {
            return;
        }
        let window = self.config.scaler.tick_ms;
        let mut observed: BTreeMap<(PipelineId, ModelId), f64> = BTreeMap::new();
        for (key, stage) in &mut self.stages {
            observed.insert(key.clone(), stage.scaler_count as f64 / window * 1000.0);
            stage.scaler_count = 0;
        }
        let actions = evaluate(
            &self.config.scaler,
            &mut self.scaler_state,
            self.now,
            &self.plans,
            self.cluster,
            self.profiles,
            &observed,
        );
        for action in actions {
            match action {
                ScaleAction::Up { pipeline_id, model_id } => {
                    self.do_scale_up(&pipeline_id, &model_id)
                }
                ScaleAction::Down { pipeline_id, model_id, instance_number } => {
                    self.do_scale_down(&pipeline_id, &model_id, instance_number)
                }
            }
        }
    }

    fn do_scale_up(&mut self, pipeline_id: &str, model_id: &str) {
        let Some(pipeline) = self.pipe_by_id.get(pipeline_id).copied() else { return };
        let Some(plan_idx) = self.plans.iter().position(|p| p.pipeline_id == pipeline_id) else {
            return;
        };
        let Some(coral) = self.coral.as_mut() else { return };
        match apply_scale_up(
            &mut self.plans[plan_idx],
            pipeline,
            model_id,
            coral,
            self.cluster,
            self.profiles,
            &self.current_bw,
        ) {
            Ok(k) => {
                let cfg = self.plans[plan_idx]
                    .instances_of(model_id)
                    .iter()
                    .find(|c| c.instance_number == k)
                    .cloned()
                    .expect("scale-up added the instance");
                self.scale_ups += 1;
                self.log.push(format!(
                    "[{:.0}] scale-up {pipeline_id}/{model_id} #{k} on {}",
                    self.now, cfg.device_id
                ));
                self.add_instance(pipeline_id, model_id, &cfg, false);
                self.update_peaks();
            }
            Err(reason) => {
                self.log.push(format!(
                    "[{:.0}] scale-up {pipeline_id}/{model_id} failed: {reason}",
                    self.now
                ));
            }
        }
    }

    fn do_scale_down(&mut self, pipeline_id: &str, model_id: &str, instance_number: u32) {
        let Some(plan_idx) = self.plans.iter().position(|p| p.pipeline_id == pipeline_id) else {
            return;
        };
        let Some(coral) = self.coral.as_mut() else { return };
        if !apply_scale_down(&mut self.plans[plan_idx], model_id, instance_number, coral) {
            return;
        }
        let key = (pipeline_id.to_string(), model_id.to_string());
        if let Some(stage) = self.stages.get_mut(&key) {
            if let Some(pos) = stage.instances.iter().position(|i| i.number == instance_number) {
                let inst = stage.instances.remove(pos);
                if let Some(g) = self.gpus.get_mut(&inst.gpu) {
                    g.resident_weight_mib = (g.resident_weight_mib - inst.weight_mib).max(0.0);
                }
            }
        }
        self.scale_downs += 1;
        self.log.push(format!(
            "[{:.0}] scale-down {pipeline_id}/{model_id} #{instance_number}",
            self.now
        ));
    }

    // ── Scheduler rounds ────────────────────────────────────────────────

    fn round_stats(&mut self, index: u32) -> ModelStatsMap {
        let mut stats: ModelStatsMap = BTreeMap::new();
        if index == 0 {
            // Bootstrap: every policy sees the same trace prefix.
            let window = self.config.scheduler_period_ms.min(self.config.duration_ms);
            for pipeline in self.pipelines {
                let rs = self
                    .arrivals
                    .get(&pipeline.pipeline_id)
                    .map(|t| window_stats(t, 0.0, window))
                    .unwrap_or_default();
                for model in &pipeline.models {
                    let scale = pipeline.demand_scale(model, self.profiles);
                    stats.insert(
                        (pipeline.pipeline_id.clone(), model.clone()),
                        RateStats {
                            mean_rate_qps: rs.mean_rate_qps * scale,
                            burstiness: rs.burstiness,
                        },
                    );
                }
            }
            return stats;
        }
        let window = self.config.scheduler_period_ms;
        for pipeline in self.pipelines {
            let source = pipeline.source();
            let src = self
                .source_stats
                .get(&pipeline.pipeline_id)
                .copied()
                .unwrap_or_default();
            for model in &pipeline.models {
                let key = (pipeline.pipeline_id.clone(), model.clone());
                let rs = if model == source {
                    // Offered demand, measured at the source itself.
                    RateStats { mean_rate_qps: src.rate_qps(window), burstiness: src.cov() }
                } else {
                    let st = self.stages.get(&key).map(|s| s.stats).unwrap_or_default();
                    let burst = if st.count > 0 { st.cov() } else { src.cov() };
                    RateStats { mean_rate_qps: st.rate_qps(window), burstiness: burst }
                };
                stats.insert(key, rs);
            }
        }
        // Reset windows for the next round.
        for s in self.source_stats.values_mut() {
            s.reset();
        }
        for s in self.stages.values_mut() {
            s.stats.reset();
        }
        stats
    }

    fn handle_round(&mut self, index: u32) {
        let stats = self.round_stats(index);
        let inputs = RoundInputs {
            now_ms: self.now,
            pipelines: self.pipelines,
            cluster: self.cluster,
            profiles: self.profiles,
            bandwidth: &self.current_bw,
            stats: &stats,
            seed: self.config.seed,
        };
        let out = plan_round(self.policy, &inputs);
        let instance_total: usize =
            out.plans.iter().map(|p| p.instances.values().map(Vec::len).sum::<usize>()).sum();
        let unplaced: usize = out.plans.iter().map(|p| p.unplaced.len()).sum();
        self.log.push(format!(
            "[{:.0}] round {index}: {instance_total} instances deployed, {unplaced} unplaced",
            self.now
        ));
        self.deploy(out.plans, out.coral);
        self.rounds += 1;
        let next = self.now + self.config.scheduler_period_ms;
        if next < self.config.duration_ms - EPS {
            self.events.push(next, EventKind::SchedulerRound { index: index + 1 });
        }
    }

    /// Worst-case time from a unit leaving `model` until it clears the sink:
    /// transfer, the child's own fill allowance, and execution, along the
    /// heaviest child chain, using the plan's primary instances. Each
    /// stage's allowance is half the SLO minus *its* downstream budget —
    /// the same telescoping rule that sets the fill timeouts — so budgets
    /// deeper in the pipeline shrink the waits upstream stages may take.
    /// Unknown links count as huge so the fill timeout collapses to zero.
    fn downstream_budget_ms(&self, plan: &PipelinePlan, pipeline: &PipelineSpec, model: &ModelId) -> f64 {
        let mut worst: f64 = 0.0;
        let from_device = plan
            .primary(model)
            .map(|c| c.device_id.clone())
            .unwrap_or_else(|| pipeline.source_device.clone());
        for child in pipeline.children(model) {
            let Some(cfg) = plan.primary(&child) else { continue };
            let Some(profile) = self.profiles.get(&child) else { continue };
            let exec = self
                .cluster
                .device(&cfg.device_id)
                .and_then(|d| profile.latency_ms(&d.device_class, cfg.batch_size))
                .unwrap_or(f64::INFINITY);
            let io = if cfg.device_id == from_device {
                self.intra_delay_ms(&cfg.device_id, profile.in_bytes)
            } else {
                match self.current_bw.get(&from_device, &cfg.device_id) {
                    Some(bw) if bw > 0.0 => profile.in_bytes / bw * 1000.0,
                    _ => f64::INFINITY,
                }
            };
            let below = self.downstream_budget_ms(plan, pipeline, &child);
            let allowance = (pipeline.slo_ms / 2.0 - below).max(0.0);
            worst = worst.max(io + allowance + exec + below);
        }
        worst
    }

    fn add_instance(
        &mut self,
        pipeline_id: &str,
        model_id: &str,
        cfg: &crate::domain::InstanceConfig,
        replacing: bool,
    ) {
        let Some(profile) = self.profiles.get(model_id) else { return };
        let Some(device) = self.cluster.device(&cfg.device_id) else { return };
        let class = &device.device_class;
        let token = self.next_token;
        self.next_token += 1;
        let inst = DeployedInstance {
            number: cfg.instance_number,
            device_id: cfg.device_id.clone(),
            gpu: GpuKey::new(cfg.device_id.clone(), cfg.gpu_id.clone()),
            batch_size: cfg.batch_size,
            exec_ms: profile.latency_ms(class, cfg.batch_size).unwrap_or(f64::INFINITY),
            width: profile.util(class, cfg.batch_size).unwrap_or(0.0),
            intermediate_mib: profile.intermediate_mib(cfg.batch_size).unwrap_or(0.0),
            weight_mib: profile.weight_mib,
            placement: cfg.placement.clone(),
            busy: false,
            token,
        };
        if let Some(g) = self.gpus.get_mut(&inst.gpu) {
            g.resident_weight_mib += inst.weight_mib;
        }
        let key = (pipeline_id.to_string(), model_id.to_string());
        let stage = self.stages.entry(key).or_default();
        if let Some(p) = &inst.placement {
            let at = {
                let duty = p.duty_cycle_ms;
                if duty <= 0.0 {
                    self.now
                } else if replacing && self.now >= p.start_ms {
                    // A replacement's chains begin at the next slot strictly
                    // after the handover instant: when `now` falls exactly on
                    // a slot boundary the outgoing plan's chain has just
                    // served that slot, and batching it again would overlap
                    // widths the admission check never allowed.
                    (((self.now - p.start_ms) / duty + EPS).floor() + 1.0) * duty + p.start_ms
                } else {
                    let k = ((self.now - p.start_ms) / duty - EPS).ceil().max(0.0);
                    k * duty + p.start_ms
                }
            };
            if at <= self.config.duration_ms + EPS {
                self.events.push(
                    at,
                    EventKind::PortionDispatch {
                        pipeline_id: pipeline_id.to_string(),
                        model_id: model_id.to_string(),
                        instance_number: inst.number,
                        token,
                    },
                );
            }
        }
        stage.instances.push(inst);
        stage.instances.sort_by_key(|i| i.number);
        if stage.instances.iter().any(|i| i.placement.is_none()) {
            self.try_dispatch(pipeline_id, model_id);
        }
    }

    fn deploy(&mut self, plans: Vec<PipelinePlan>, coral: Option<CoralState>) {
        // Old instances stop scheduling (their tokens die with them);
        // running batches finish under the old configuration.
        let old = std::mem::take(&mut self.stages);
        for g in self.gpus.values_mut() {
            g.resident_weight_mib = 0.0;
        }
        self.plans = plans;
        self.coral = coral;
        self.scaler_state.reset();

        // Rebuild stages, preserving queues and window state.
        for pipeline in self.pipelines {
            let plan = self.plans.iter().find(|p| p.pipeline_id == pipeline.pipeline_id);
            for model in &pipeline.models {
                let key = (pipeline.pipeline_id.clone(), model.clone());
                let prev = old.get(&key);
                let mut stage = StageRuntime {
                    children: pipeline.children(model).into_iter().cloned().collect(),
                    fanout: self.profiles.get(model).map(|p| p.fanout).unwrap_or(1.0),
                    queue: prev.map(|s| s.queue.clone()).unwrap_or_default(),
                    carry: prev.map(|s| s.carry.clone()).unwrap_or_default(),
                    epoch: prev.map(|s| s.epoch + 1).unwrap_or(0),
                    timer_pending: prev.map(|s| s.timer_pending).unwrap_or(false),
                    stats: prev.map(|s| s.stats).unwrap_or_default(),
                    scaler_count: prev.map(|s| s.scaler_count).unwrap_or(0),
                    dropped: prev.map(|s| s.dropped).unwrap_or(0),
                    ..StageRuntime::default()
                };
                if let Some(plan) = plan {
                    stage.fill_timeout_ms = {
                        let dw = self.downstream_worst_ms(plan, pipeline, model);
                        (pipeline.slo_ms / 2.0 - dw).max(0.0)
                    };
                }
                self.stages.insert(key, stage);
            }
        }

        // Register instances (weights, portion chains, queue dispatch).
        // After the first deployment, fresh chains must not re-serve a slot
        // the outgoing plan's chains fired on this very instant.
        let replacing = self.rounds > 0;
        let plans = std::mem::take(&mut self.plans);
        for plan in &plans {
            for (model, instances) in &plan.instances {
                for cfg in instances {
                    self.add_instance(&plan.pipeline_id, model, cfg, replacing);
                }
            }
        }
        self.plans = plans;
        self.update_peaks();
    }

    // ── Finalization ────────────────────────────────────────────────────

    fn finish(mut self) -> SimOutput {
        let duration_s = self.config.duration_ms / 1000.0;
        let mut totals = FlowCounters::default();
        let mut per_pipeline = BTreeMap::new();
        for (pid, acc) in &self.per_pipe {
            totals.source_arrivals += acc.counters.source_arrivals;
            totals.completions += acc.counters.completions;
            totals.effective_completions += acc.counters.effective_completions;
            totals.late_completions += acc.counters.late_completions;
            totals.dropped_units += acc.counters.dropped_units;
            per_pipeline.insert(
                pid.clone(),
                PipelineReport {
                    counters: acc.counters.clone(),
                    latency: LatencySummary::from_samples(acc.latencies.clone()),
                    effective_throughput_qps: acc.counters.effective_completions as f64
                        / duration_s,
                    total_throughput_qps: acc.counters.completions as f64 / duration_s,
                },
            );
        }
        let executing_units: u64 = self.batches.values().map(|b| b.units.len() as u64).sum();
        let in_flight = self.queued_units() + executing_units + self.in_transfer_units
            + self.parked_units;

        let report = SimReport {
            policy: self.policy.name.clone(),
            seed: self.config.seed,
            duration_ms: self.config.duration_ms,
            totals: totals.clone(),
            in_flight_units: in_flight,
            effective_throughput_qps: totals.effective_completions as f64 / duration_s,
            total_throughput_qps: totals.completions as f64 / duration_s,
            goodput_ratio: if totals.completions > 0 {
                totals.effective_completions as f64 / totals.completions as f64
            } else {
                0.0
            },
            latency: LatencySummary::from_samples(std::mem::take(&mut self.all_latencies)),
            per_pipeline,
            peak_gpu_mem_mib: self
                .gpus
                .iter()
                .map(|(k, g)| (k.to_string(), g.peak_mib))
                .collect(),
            peak_total_mem_mib: self.peak_total_mib,
            inflated_batches: self.inflated_batches,
            total_batches: self.total_batches,
            scheduler_rounds: self.rounds,
            scale_ups: self.scale_ups,
            scale_downs: self.scale_downs,
            dropped_by_stage: self.dropped_by_stage.clone(),
        };
        let placement = match &self.coral {
            Some(state) => placement_report(state, &self.plans),
            None => placement_report(&CoralState::new(self.cluster), &self.plans),
        };
        SimOutput { report, timeseries: self.rows, placement, log: self.log }
    }
}
