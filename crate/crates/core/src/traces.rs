//! Arrival and bandwidth traces: loading, summary statistics, and synthetic
//! generation.
//!
//! Traces are the only stochastic input to the system. An arrival trace
//! lists when queries enter a pipeline; a bandwidth trace is a step
//! function of link capacity over time. The scheduler never sees raw
//! traces — it sees windowed [`RateStats`] (mean rate and burstiness), which
//! is also what the simulator feeds back from live telemetry.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One row of an arrival trace: `count` queries arriving at `t_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEvent {
    pub t_ms: f64,
    pub count: u32,
}

/// Query arrivals for one pipeline, timestamps strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArrivalTrace {
    pub events: Vec<ArrivalEvent>,
}

/// One bandwidth sample; the link holds this rate until the next sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub t_ms: f64,
    pub bytes_per_sec: f64,
}

/// Step-function capacity of one link, timestamps strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTrace {
    pub samples: Vec<BandwidthSample>,
}

/// Windowed arrival statistics: everything the workload distributor wants
/// to know about a stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    /// Mean arrival rate over the window, queries per second.
    pub mean_rate_qps: f64,
    /// Coefficient of variation of inter-arrival gaps: 0 for a metronome,
    /// 1 for Poisson, higher for bursty streams. 0 when the window holds
    /// fewer than two gaps.
    pub burstiness: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Csv {
        path: String,
        line: u64,
        #[source]
        source: csv::Error,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: trace is empty")]
    Empty { path: String },
}

// ── Loading ─────────────────────────────────────────────────────────────

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, TraceError> {
    csv::Reader::from_path(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Loads an arrival trace (`timestamp_ms,count` CSV), enforcing strictly
/// increasing timestamps and positive counts.
pub fn load_arrival_trace(path: &Path) -> Result<ArrivalTrace, TraceError> {
    #[derive(Deserialize)]
    struct Row {
        timestamp_ms: f64,
        count: u32,
    }
    let display = path.display().to_string();
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Csv { path: display.clone(), line: 1, source: e })?
        .clone();
    let mut events = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for result in rdr.records() {
        let record = result.map_err(|e| TraceError::Csv {
            path: display.clone(),
            line: 0,
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| TraceError::Csv {
            path: display.clone(),
            line,
            source: e,
        })?;
        if !row.timestamp_ms.is_finite() || row.timestamp_ms < 0.0 {
            return Err(TraceError::Invalid {
                path: display,
                line,
                message: format!("timestamp_ms must be finite and non-negative, got {}", row.timestamp_ms),
            });
        }
        if row.timestamp_ms <= prev {
            return Err(TraceError::Invalid {
                path: display,
                line,
                message: format!("timestamps must be strictly increasing ({} after {})", row.timestamp_ms, prev),
            });
        }
        if row.count == 0 {
            return Err(TraceError::Invalid {
                path: display,
                line,
                message: "count must be at least 1".into(),
            });
        }
        prev = row.timestamp_ms;
        events.push(ArrivalEvent { t_ms: row.timestamp_ms, count: row.count });
    }
    if events.is_empty() {
        return Err(TraceError::Empty { path: display });
    }
    Ok(ArrivalTrace { events })
}

/// Loads a bandwidth trace (`timestamp_ms,bytes_per_sec` CSV). Zero
/// bandwidth is allowed — it models an outage — but negatives are not.
pub fn load_bandwidth_trace(path: &Path) -> Result<BandwidthTrace, TraceError> {
    #[derive(Deserialize)]
    struct Row {
        timestamp_ms: f64,
        bytes_per_sec: f64,
    }
    let display = path.display().to_string();
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Csv { path: display.clone(), line: 1, source: e })?
        .clone();
    let mut samples = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for result in rdr.records() {
        let record = result.map_err(|e| TraceError::Csv {
            path: display.clone(),
            line: 0,
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| TraceError::Csv {
            path: display.clone(),
            line,
            source: e,
        })?;
        if !row.timestamp_ms.is_finite() || row.timestamp_ms < 0.0 || row.timestamp_ms <= prev {
            return Err(TraceError::Invalid {
                path: display,
                line,
                message: format!("timestamps must be strictly increasing and non-negative, got {}", row.timestamp_ms),
            });
        }
        if !row.bytes_per_sec.is_finite() || row.bytes_per_sec < 0.0 {
            return Err(TraceError::Invalid {
                path: display,
                line,
                message: format!("bytes_per_sec must be finite and non-negative, got {}", row.bytes_per_sec),
            });
        }
        prev = row.timestamp_ms;
        samples.push(BandwidthSample { t_ms: row.timestamp_ms, bytes_per_sec: row.bytes_per_sec });
    }
    if samples.is_empty() {
        return Err(TraceError::Empty { path: display });
    }
    Ok(BandwidthTrace { samples })
}

// ── Statistics ──────────────────────────────────────────────────────────

/// Coefficient of variation of inter-arrival gaps over a sorted timestamp
/// slice. Fewer than two gaps (or a zero mean gap) yields 0.
pub fn burstiness(timestamps_ms: &[f64]) -> f64 {
    if timestamps_ms.len() < 3 {
        return 0.0;
    }
    let gaps: Vec<f64> = timestamps_ms.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
    var.sqrt() / mean
}

impl ArrivalTrace {
    /// Timestamps in `[start_ms, end_ms)`, with multi-count events expanded
    /// into repeated timestamps.
    pub fn expand_window(&self, start_ms: f64, end_ms: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for ev in &self.events {
            if ev.t_ms >= start_ms && ev.t_ms < end_ms {
                for _ in 0..ev.count {
                    out.push(ev.t_ms);
                }
            }
        }
        out
    }

    /// Total queries arriving in `[start_ms, end_ms)`.
    pub fn total_in(&self, start_ms: f64, end_ms: f64) -> u64 {
        self.events
            .iter()
            .filter(|ev| ev.t_ms >= start_ms && ev.t_ms < end_ms)
            .map(|ev| ev.count as u64)
            .sum()
    }
}

/// Summarizes a trace window into mean rate and burstiness.
pub fn window_stats(trace: &ArrivalTrace, start_ms: f64, end_ms: f64) -> RateStats {
    let window_s = (end_ms - start_ms).max(0.0) / 1000.0;
    if window_s <= 0.0 {
        return RateStats::default();
    }
    let ts = trace.expand_window(start_ms, end_ms);
    RateStats {
        mean_rate_qps: ts.len() as f64 / window_s,
        burstiness: burstiness(&ts),
    }
}

/// Statistics for a downstream model fed by a stream with `stats`, through a
/// stage that multiplies volume by `fanout`. Rate scales; burstiness is a
/// shape property and passes through unchanged.
pub fn scale_downstream(stats: RateStats, fanout: f64) -> RateStats {
    RateStats {
        mean_rate_qps: stats.mean_rate_qps * fanout.max(0.0),
        burstiness: stats.burstiness,
    }
}

impl BandwidthTrace {
    /// Bandwidth in force at `t_ms`: the most recent sample at or before it,
    /// or the first sample's value before the trace begins.
    pub fn bandwidth_at(&self, t_ms: f64) -> f64 {
        let mut current = self.samples.first().map(|s| s.bytes_per_sec).unwrap_or(0.0);
        for s in &self.samples {
            if s.t_ms <= t_ms {
                current = s.bytes_per_sec;
            } else {
                break;
            }
        }
        current
    }
}

// ── Generation ──────────────────────────────────────────────────────────

/// How arrival instants are spaced. `Poisson` models uncoordinated request
/// streams; `Periodic` models fixed-rate sources such as camera feeds that
/// emit one frame every `1/rate` seconds, ignoring the seed entirely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    #[default]
    Poisson,
    Periodic,
}

/// Spec for a synthetic arrival trace with optional periodic surges.
/// During a surge the instantaneous rate is `rate_qps * (1 + amplitude)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalGenSpec {
    pub rate_qps: f64,
    pub duration_ms: f64,
    #[serde(default)]
    pub kind: ArrivalKind,
    /// Explicit seed; when absent the caller derives one from the scenario
    /// seed and the stream's name.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub surge: Option<SurgeSpec>,
}

/// Periodic surge window: the last `duty` fraction of every `period_ms` runs
/// at the surged rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgeSpec {
    pub amplitude: f64,
    pub period_ms: f64,
    #[serde(default = "default_duty")]
    pub duty: f64,
}

fn default_duty() -> f64 {
    0.5
}

/// Spec for a synthetic square-wave bandwidth trace: `base_bytes_per_sec`
/// normally, dipping to `low_bytes_per_sec` for the last `duty` fraction of
/// every `period_ms`. Purely deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGenSpec {
    pub base_bytes_per_sec: f64,
    pub duration_ms: f64,
    #[serde(default)]
    pub dip: Option<DipSpec>,
    #[serde(default = "default_sample_every_ms")]
    pub sample_every_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipSpec {
    pub low_bytes_per_sec: f64,
    pub period_ms: f64,
    #[serde(default = "default_duty")]
    pub duty: f64,
}

fn default_sample_every_ms() -> f64 {
    1000.0
}

/// Stable seed derivation: mixes a base seed with a name, so every stream
/// gets an independent but reproducible generator.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn surged(t_ms: f64, surge: &Option<SurgeSpec>) -> f64 {
    match surge {
        Some(s) if s.period_ms > 0.0 => {
            let phase = (t_ms / s.period_ms).fract();
            if phase >= 1.0 - s.duty.clamp(0.0, 1.0) {
                1.0 + s.amplitude.max(0.0)
            } else {
                1.0
            }
        }
        _ => 1.0,
    }
}

/// Generates an arrival trace: Poisson by thinning against the peak rate,
/// or periodic by stepping one inter-frame gap at a time. Deterministic for
/// a given spec and seed (periodic traces ignore the seed).
pub fn generate_arrival_trace(spec: &ArrivalGenSpec, seed: u64) -> ArrivalTrace {
    let mut events = Vec::new();
    if spec.rate_qps <= 0.0 || spec.duration_ms <= 0.0 {
        return ArrivalTrace { events };
    }
    match spec.kind {
        ArrivalKind::Poisson => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed));
            let peak = spec.rate_qps
                * spec
                    .surge
                    .map(|s| 1.0 + s.amplitude.max(0.0))
                    .unwrap_or(1.0);
            let mut t = 0.0f64;
            let mut prev = f64::NEG_INFINITY;
            loop {
                // Exponential gap at the peak rate, then thin down to the
                // instantaneous rate.
                let u: f64 = rng.gen::<f64>();
                t += -(1.0 - u).ln() / peak * 1000.0;
                if t >= spec.duration_ms {
                    break;
                }
                let accept: f64 = rng.gen();
                if accept < spec.rate_qps * surged(t, &spec.surge) / peak {
                    let stamped = if t <= prev { prev + 1e-6 } else { t };
                    prev = stamped;
                    events.push(ArrivalEvent { t_ms: stamped, count: 1 });
                }
            }
        }
        ArrivalKind::Periodic => {
            let mut t = 0.0f64;
            while t < spec.duration_ms {
                events.push(ArrivalEvent { t_ms: t, count: 1 });
                t += 1000.0 / (spec.rate_qps * surged(t, &spec.surge));
            }
        }
    }
    ArrivalTrace { events }
}

/// Generates a square-wave bandwidth trace by sampling the wave every
/// `sample_every_ms`, collapsing runs of equal values.
pub fn generate_bandwidth_trace(spec: &BandwidthGenSpec) -> BandwidthTrace {
    let mut samples = Vec::new();
    let step = spec.sample_every_ms.max(1.0);
    let mut t = 0.0;
    let mut last: Option<f64> = None;
    while t < spec.duration_ms.max(step) {
        let value = match &spec.dip {
            Some(d) if d.period_ms > 0.0 => {
                let phase = (t / d.period_ms).fract();
                if phase >= 1.0 - d.duty.clamp(0.0, 1.0) {
                    d.low_bytes_per_sec
                } else {
                    spec.base_bytes_per_sec
                }
            }
            _ => spec.base_bytes_per_sec,
        };
        if last != Some(value) {
            samples.push(BandwidthSample { t_ms: t, bytes_per_sec: value });
            last = Some(value);
        }
        t += step;
    }
    BandwidthTrace { samples }
}

// ── Writing (for the trace-generation CLI) ──────────────────────────────

pub fn write_arrival_csv(trace: &ArrivalTrace, path: &Path) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    wtr.write_record(["timestamp_ms", "count"]).map_err(|e| TraceError::Csv {
        path: path.display().to_string(),
        line: 1,
        source: e,
    })?;
    for ev in &trace.events {
        wtr.write_record([format!("{:.6}", ev.t_ms), ev.count.to_string()])
            .map_err(|e| TraceError::Csv {
                path: path.display().to_string(),
                line: 0,
                source: e,
            })?;
    }
    wtr.flush().map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn write_bandwidth_csv(trace: &BandwidthTrace, path: &Path) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    wtr.write_record(["timestamp_ms", "bytes_per_sec"]).map_err(|e| TraceError::Csv {
        path: path.display().to_string(),
        line: 1,
        source: e,
    })?;
    for s in &trace.samples {
        wtr.write_record([format!("{:.6}", s.t_ms), format!("{:.3}", s.bytes_per_sec)])
            .map_err(|e| TraceError::Csv {
                path: path.display().to_string(),
                line: 0,
                source: e,
            })?;
    }
    wtr.flush().map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Per-stream stats keyed by an arbitrary name; convenience for callers that
/// summarize many traces over the same window.
pub fn stats_for_all(
    traces: &BTreeMap<String, ArrivalTrace>,
    start_ms: f64,
    end_ms: f64,
) -> BTreeMap<String, RateStats> {
    traces
        .iter()
        .map(|(k, t)| (k.clone(), window_stats(t, start_ms, end_ms)))
        .collect()
}
