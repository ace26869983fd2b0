//! The simulator's event queue: a deterministic min-heap over
//! (timestamp, kind priority, insertion sequence).
//!
//! Kind priorities resolve same-timestamp races the same way every run:
//! deliveries and bandwidth changes land before batch completions, which
//! land before new arrivals, which land before dispatch decisions — so a
//! unit delivered at exactly a portion's start time is included in that
//! portion's batch, and a scheduler round always sees fully settled state.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::domain::{DeviceId, ModelId, PipelineId};

/// One inference request traveling through a pipeline. `birth_ms` is the
/// source arrival time of its root ancestor; the deadline is birth + SLO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub birth_ms: f64,
    pub deadline_ms: f64,
    /// When the unit entered its current queue (set on delivery).
    pub enqueued_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Units arrive at a model's queue (transfer finished).
    Deliver { pipeline_id: PipelineId, model_id: ModelId, units: Vec<Unit> },
    /// A link's capacity changes.
    BandwidthUpdate { a: DeviceId, b: DeviceId, bytes_per_sec: f64 },
    /// An executing batch finishes.
    BatchComplete { batch_id: u64 },
    /// `count` fresh queries appear at a pipeline's source.
    SourceArrival { pipeline_id: PipelineId, count: u32 },
    /// A portion-placed instance's turn on its stream comes up.
    PortionDispatch { pipeline_id: PipelineId, model_id: ModelId, instance_number: u32, token: u64 },
    /// A partially filled queue has waited long enough.
    FillTimeout { pipeline_id: PipelineId, model_id: ModelId, epoch: u64 },
    /// The runtime autoscaler wakes up.
    ScalerTick,
    /// The periodic full re-plan.
    SchedulerRound { index: u32 },
}

fn priority(kind: &EventKind) -> u8 {
    match kind {
        EventKind::Deliver { .. } => 0,
        EventKind::BandwidthUpdate { .. } => 0,
        EventKind::BatchComplete { .. } => 1,
        EventKind::SourceArrival { .. } => 2,
        EventKind::PortionDispatch { .. } => 3,
        EventKind::FillTimeout { .. } => 4,
        EventKind::ScalerTick => 5,
        EventKind::SchedulerRound { .. } => 6,
    }
}

#[derive(Debug)]
struct Queued {
    t_ms: f64,
    prio: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    /// Reversed so the `BinaryHeap` max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t_ms
            .total_cmp(&self.t_ms)
            .then_with(|| other.prio.cmp(&self.prio))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Deterministic time-ordered event queue.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

impl EventQueue {
    /// Timestamps are quantized to a nanosecond so that logically
    /// simultaneous events computed through different floating-point
    /// addition orders land on the same instant and resolve by kind
    /// priority instead of 1-ulp noise.
    pub fn push(&mut self, t_ms: f64, kind: EventKind) {
        let t_ms = if t_ms.is_finite() { (t_ms * 1e6).round() / 1e6 } else { t_ms };
        let prio = priority(&kind);
        self.heap.push(Queued { t_ms, prio, seq: self.seq, kind });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, EventKind)> {
        self.heap.pop().map(|q| (q.t_ms, q.kind))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
