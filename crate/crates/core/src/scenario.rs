//! Scenario files: one TOML document describes a whole experiment — the
//! device cluster, the inference pipelines, where to find (or how to
//! generate) arrival and bandwidth traces, the profile tables, and the
//! simulation knobs. Loading resolves every relative path against the
//! scenario file's directory and derives per-stream generator seeds from
//! the scenario seed, so a scenario is reproducible from the one file.
//!
//! ```toml
//! name = "traffic_small"
//! server_device = "server"
//!
//! [sim]
//! duration_ms = 60000
//! seed = 1
//!
//! [profiles]
//! latency_csv = "profiles/latency.csv"
//! models_csv = "profiles/models.csv"
//!
//! [[device]]
//! id = "edge0"
//! class = "agx"
//! intra_bw_bytes_per_sec = 1e9
//!
//! [[device.gpu]]
//! id = "g0"
//! mem_capacity_mib = 8192
//! max_util = 1.0
//! streams = 4
//!
//! [[pipeline]]
//! id = "cam0"
//! models = ["det", "cls"]
//! edges = [["det", "cls"]]
//! slo_ms = 200.0
//! source_device = "edge0"
//!
//! [[arrival]]
//! pipeline = "cam0"
//! rate_qps = 15.0            # or: csv = "traces/cam0.csv"
//! kind = "periodic"          # fixed-fps feed; default "poisson"
//!
//! [[bandwidth]]
//! from = "edge0"
//! to = "server"
//! base_bytes_per_sec = 2.5e6 # or: csv = "traces/uplink.csv"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::ScalerConfig;
use crate::domain::{
    load_profiles, ClusterSpec, DeviceId, DeviceSpec, GpuSpec, PipelineId, PipelineSpec,
    ProfileError, ProfileSet,
};
use crate::simengine::SimConfig;
use crate::traces::{
    derive_seed, generate_arrival_trace, generate_bandwidth_trace, load_arrival_trace,
    load_bandwidth_trace, ArrivalGenSpec, ArrivalKind, ArrivalTrace, BandwidthGenSpec,
    BandwidthTrace, DipSpec, SurgeSpec, TraceError,
};

/// A fully resolved experiment: everything a simulation run consumes, plus
/// a name for reports.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub cluster: ClusterSpec,
    pub pipelines: Vec<PipelineSpec>,
    pub profiles: ProfileSet,
    pub arrivals: BTreeMap<PipelineId, ArrivalTrace>,
    pub bandwidth: BTreeMap<(DeviceId, DeviceId), BandwidthTrace>,
    pub sim: SimConfig,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
}

/// One machine-readable validation finding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioIssue {
    /// Stable category: `cluster`, `pipeline`, `unknown_device`,
    /// `duplicate_pipeline`, `missing_arrivals`, `orphan_arrival`,
    /// `unknown_link_device`, or `sim`.
    pub code: String,
    pub detail: String,
}

impl ScenarioIssue {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.to_string(), detail: detail.into() }
    }
}

// ── Raw TOML shape ──────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: String,
    server_device: String,
    #[serde(default)]
    sim: Option<RawSim>,
    #[serde(default)]
    scaler: Option<RawScaler>,
    profiles: RawProfiles,
    #[serde(rename = "device")]
    devices: Vec<RawDevice>,
    #[serde(rename = "pipeline")]
    pipelines: Vec<RawPipeline>,
    #[serde(rename = "arrival", default)]
    arrivals: Vec<RawArrival>,
    #[serde(rename = "bandwidth", default)]
    bandwidth: Vec<RawBandwidth>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    duration_ms: Option<f64>,
    scheduler_period_ms: Option<f64>,
    seed: Option<u64>,
    telemetry_bucket_ms: Option<f64>,
    interference: Option<bool>,
    interference_scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScaler {
    surge_threshold: Option<f64>,
    dip_threshold: Option<f64>,
    cooldown_ms: Option<f64>,
    tick_ms: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfiles {
    latency_csv: String,
    models_csv: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    id: String,
    class: String,
    intra_bw_bytes_per_sec: f64,
    #[serde(rename = "gpu", default)]
    gpus: Vec<RawGpu>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGpu {
    id: String,
    mem_capacity_mib: f64,
    max_util: f64,
    streams: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    id: String,
    models: Vec<String>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    slo_ms: f64,
    source_device: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArrival {
    pipeline: String,
    csv: Option<String>,
    rate_qps: Option<f64>,
    #[serde(default)]
    kind: Option<ArrivalKind>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    surge: Option<SurgeSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBandwidth {
    from: String,
    to: String,
    csv: Option<String>,
    base_bytes_per_sec: Option<f64>,
    #[serde(default)]
    dip: Option<DipSpec>,
    #[serde(default)]
    sample_every_ms: Option<f64>,
}

// ── Loading ─────────────────────────────────────────────────────────────

/// Knobs applied on top of the file's `[sim]` table *before* traces are
/// materialized, so an overridden seed or duration flows into generated
/// arrivals and bandwidth samples (a trace pinned to a CSV, or an arrival
/// with its own explicit `seed`, is unaffected by the seed override).
#[derive(Debug, Clone, Copy, Default)]
pub struct ScenarioOverrides {
    pub seed: Option<u64>,
    pub duration_ms: Option<f64>,
}

/// Parses a scenario file and resolves it completely: profiles and trace
/// CSVs load relative to the file, generator-specified traces are
/// synthesized with seeds derived from the scenario seed and the stream's
/// name. Structural problems (bad TOML, missing files, an arrival that is
/// both CSV and generator) are errors; semantic ones (unknown devices,
/// missing profiles) are left to [`validate_scenario`].
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    load_scenario_with(path, ScenarioOverrides::default())
}

/// [`load_scenario`] with seed/duration overrides applied ahead of trace
/// generation.
pub fn load_scenario_with(
    path: &Path,
    overrides: ScenarioOverrides,
) -> Result<Scenario, ScenarioError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: shown.clone(), source: e })?;
    let raw: RawScenario = toml::from_str(&text)
        .map_err(|e| ScenarioError::Toml { path: shown.clone(), source: e })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let invalid =
        |detail: String| ScenarioError::Invalid { path: shown.clone(), detail };

    let mut sim = SimConfig::default();
    if let Some(s) = &raw.sim {
        if let Some(v) = s.duration_ms {
            sim.duration_ms = v;
        }
        if let Some(v) = s.scheduler_period_ms {
            sim.scheduler_period_ms = v;
        }
        if let Some(v) = s.seed {
            sim.seed = v;
        }
        if let Some(v) = s.telemetry_bucket_ms {
            sim.telemetry_bucket_ms = v;
        }
        if let Some(v) = s.interference {
            sim.interference = v;
        }
        if let Some(v) = s.interference_scale {
            sim.interference_scale = v;
        }
    }
    if let Some(v) = overrides.seed {
        sim.seed = v;
    }
    if let Some(v) = overrides.duration_ms {
        sim.duration_ms = v;
    }
    let mut scaler = ScalerConfig::default();
    if let Some(s) = &raw.scaler {
        if let Some(v) = s.surge_threshold {
            scaler.surge_threshold = v;
        }
        if let Some(v) = s.dip_threshold {
            scaler.dip_threshold = v;
        }
        if let Some(v) = s.cooldown_ms {
            scaler.cooldown_ms = v;
        }
        if let Some(v) = s.tick_ms {
            scaler.tick_ms = v;
        }
    }
    sim.scaler = scaler;

    let profiles = load_profiles(
        &base.join(&raw.profiles.latency_csv),
        &base.join(&raw.profiles.models_csv),
    )?;

    let cluster = ClusterSpec {
        devices: raw
            .devices
            .iter()
            .map(|d| DeviceSpec {
                device_id: d.id.clone(),
                device_class: d.class.clone(),
                gpus: d
                    .gpus
                    .iter()
                    .map(|g| GpuSpec {
                        gpu_id: g.id.clone(),
                        mem_capacity_mib: g.mem_capacity_mib,
                        max_util: g.max_util,
                        stream_count: g.streams,
                    })
                    .collect(),
                intra_bw_bytes_per_sec: d.intra_bw_bytes_per_sec,
            })
            .collect(),
        server_device: raw.server_device.clone(),
    };

    let pipelines: Vec<PipelineSpec> = raw
        .pipelines
        .iter()
        .map(|p| PipelineSpec {
            pipeline_id: p.id.clone(),
            models: p.models.clone(),
            edges: p.edges.clone(),
            slo_ms: p.slo_ms,
            source_device: p.source_device.clone(),
        })
        .collect();

    let mut arrivals = BTreeMap::new();
    for a in &raw.arrivals {
        let trace = match (&a.csv, a.rate_qps) {
            (Some(csv), None) => load_arrival_trace(&base.join(csv))?,
            (None, Some(rate_qps)) => {
                let spec = ArrivalGenSpec {
                    rate_qps,
                    duration_ms: sim.duration_ms,
                    kind: a.kind.unwrap_or_default(),
                    seed: a.seed,
                    surge: a.surge,
                };
                generate_arrival_trace(
                    &spec,
                    derive_seed(sim.seed, &format!("arrival/{}", a.pipeline)),
                )
            }
            _ => {
                return Err(invalid(format!(
                    "arrival for {}: set exactly one of `csv` or `rate_qps`",
                    a.pipeline
                )))
            }
        };
        if arrivals.insert(a.pipeline.clone(), trace).is_some() {
            return Err(invalid(format!("duplicate arrival entry for {}", a.pipeline)));
        }
    }

    let mut bandwidth = BTreeMap::new();
    for b in &raw.bandwidth {
        let trace = match (&b.csv, b.base_bytes_per_sec) {
            (Some(csv), None) => load_bandwidth_trace(&base.join(csv))?,
            (None, Some(base_bytes_per_sec)) => generate_bandwidth_trace(&BandwidthGenSpec {
                base_bytes_per_sec,
                duration_ms: sim.duration_ms,
                dip: b.dip,
                sample_every_ms: b.sample_every_ms.unwrap_or(1_000.0),
            }),
            _ => {
                return Err(invalid(format!(
                    "bandwidth {}-{}: set exactly one of `csv` or `base_bytes_per_sec`",
                    b.from, b.to
                )))
            }
        };
        let key = (b.from.clone(), b.to.clone());
        let mirror = (b.to.clone(), b.from.clone());
        if bandwidth.contains_key(&key) || bandwidth.contains_key(&mirror) {
            return Err(invalid(format!("duplicate bandwidth entry for {}-{}", b.from, b.to)));
        }
        bandwidth.insert(key, trace);
    }

    Ok(Scenario {
        name: raw.name,
        description: raw.description,
        cluster,
        pipelines,
        profiles,
        arrivals,
        bandwidth,
        sim,
    })
}

// ── Validation ──────────────────────────────────────────────────────────

/// Checks a loaded scenario for semantic problems and returns every issue
/// found (empty means runnable). Structural file errors are already
/// surfaced by [`load_scenario`].
pub fn validate_scenario(scenario: &Scenario) -> Vec<ScenarioIssue> {
    let mut issues = Vec::new();
    let s = scenario;

    if let Err(e) = s.cluster.validate() {
        issues.push(ScenarioIssue::new("cluster", e.to_string()));
    }
    let device_ids: BTreeSet<&str> =
        s.cluster.devices.iter().map(|d| d.device_id.as_str()).collect();

    let mut seen = BTreeSet::new();
    for p in &s.pipelines {
        if !seen.insert(p.pipeline_id.as_str()) {
            issues.push(ScenarioIssue::new(
                "duplicate_pipeline",
                format!("pipeline {} is defined twice", p.pipeline_id),
            ));
        }
        if let Err(e) = p.validate(&s.profiles) {
            issues.push(ScenarioIssue::new("pipeline", e.to_string()));
        }
        if !device_ids.contains(p.source_device.as_str()) {
            issues.push(ScenarioIssue::new(
                "unknown_device",
                format!(
                    "pipeline {} sources from unknown device {}",
                    p.pipeline_id, p.source_device
                ),
            ));
        }
        if !s.arrivals.contains_key(&p.pipeline_id) {
            issues.push(ScenarioIssue::new(
                "missing_arrivals",
                format!("pipeline {} has no arrival trace", p.pipeline_id),
            ));
        }
    }
    for pipeline_id in s.arrivals.keys() {
        if !s.pipelines.iter().any(|p| &p.pipeline_id == pipeline_id) {
            issues.push(ScenarioIssue::new(
                "orphan_arrival",
                format!("arrival trace for unknown pipeline {pipeline_id}"),
            ));
        }
    }
    for (a, b) in s.bandwidth.keys() {
        for end in [a, b] {
            if !device_ids.contains(end.as_str()) {
                issues.push(ScenarioIssue::new(
                    "unknown_link_device",
                    format!("bandwidth link {a}-{b} references unknown device {end}"),
                ));
            }
        }
    }

    for (value, what) in [
        (s.sim.duration_ms, "duration_ms"),
        (s.sim.scheduler_period_ms, "scheduler_period_ms"),
        (s.sim.telemetry_bucket_ms, "telemetry_bucket_ms"),
        (s.sim.scaler.tick_ms, "scaler tick_ms"),
        (s.sim.scaler.cooldown_ms, "scaler cooldown_ms"),
    ] {
        if !(value > 0.0) {
            issues.push(ScenarioIssue::new("sim", format!("{what} must be positive, got {value}")));
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const PROFILES_LATENCY: &str =
        "model_id,device_class,batch_size,latency_ms,util,intermediate_mib\n\
         det,server_gpu,1,12,0.30,40\n\
         det,agx,1,35,0.60,40\n\
         cls,server_gpu,1,5,0.10,10\n";

    const PROFILES_MODELS: &str = "model_id,weight_mib,in_bytes,out_bytes,fanout\n\
                                   det,800,150000,4000,1.0\n\
                                   cls,300,4000,200,1.0\n";

    const SCENARIO: &str = r#"
name = "mini"
description = "two-stage smoke scenario"
server_device = "server"

[sim]
duration_ms = 30000
seed = 42

[scaler]
tick_ms = 2500

[profiles]
latency_csv = "latency.csv"
models_csv = "models.csv"

[[device]]
id = "edge0"
class = "agx"
intra_bw_bytes_per_sec = 1e9

[[device.gpu]]
id = "g0"
mem_capacity_mib = 8192
max_util = 1.0
streams = 4

[[device]]
id = "server"
class = "server_gpu"
intra_bw_bytes_per_sec = 1e10

[[device.gpu]]
id = "g0"
mem_capacity_mib = 24576
max_util = 1.0
streams = 8

[[pipeline]]
id = "cam0"
models = ["det", "cls"]
edges = [["det", "cls"]]
slo_ms = 200.0
source_device = "edge0"

[[arrival]]
pipeline = "cam0"
rate_qps = 15.0
surge = { amplitude = 1.0, period_ms = 8000.0, duty = 0.25 }

[[bandwidth]]
from = "edge0"
to = "server"
base_bytes_per_sec = 2.5e6
dip = { low_bytes_per_sec = 500000.0, period_ms = 10000.0, duty = 0.2 }
"#;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path).unwrap().write_all(contents.as_bytes()).unwrap();
        path
    }

    fn write_standard(dir: &Path) -> std::path::PathBuf {
        write_file(dir, "latency.csv", PROFILES_LATENCY);
        write_file(dir, "models.csv", PROFILES_MODELS);
        write_file(dir, "scenario.toml", SCENARIO)
    }

    #[test]
    fn loads_a_scenario_with_generated_traces() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_standard(dir.path());
        let s = load_scenario(&path).unwrap();

        assert_eq!(s.name, "mini");
        assert_eq!(s.sim.duration_ms, 30_000.0);
        assert_eq!(s.sim.seed, 42);
        assert_eq!(s.sim.scaler.tick_ms, 2_500.0);
        assert_eq!(s.sim.scaler.cooldown_ms, 30_000.0, "unset knobs keep defaults");
        assert_eq!(s.cluster.devices.len(), 2);
        assert_eq!(s.cluster.server_device, "server");
        assert_eq!(s.pipelines[0].slo_ms, 200.0);
        assert_eq!(s.profiles.get("det").unwrap().latency_ms("agx", 1), Some(35.0));

        let trace = &s.arrivals["cam0"];
        assert!(!trace.events.is_empty());
        assert!(trace.events.iter().all(|e| e.t_ms < 30_000.0));
        let link = &s.bandwidth[&("edge0".to_string(), "server".to_string())];
        assert!(link.samples.iter().any(|b| b.bytes_per_sec == 500_000.0), "dip present");
        assert!(validate_scenario(&s).is_empty());
    }

    #[test]
    fn generated_traces_depend_only_on_the_scenario_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_standard(dir.path());
        let a = load_scenario(&path).unwrap();
        let b = load_scenario(&path).unwrap();
        assert_eq!(a.arrivals, b.arrivals);

        let reseeded = SCENARIO.replace("seed = 42", "seed = 43");
        write_file(dir.path(), "scenario.toml", &reseeded);
        let c = load_scenario(&path).unwrap();
        assert_ne!(a.arrivals, c.arrivals, "a different seed must move the trace");

        // Overriding the seed at load time is the same as editing the file.
        write_file(dir.path(), "scenario.toml", SCENARIO);
        let overridden = load_scenario_with(
            &path,
            ScenarioOverrides { seed: Some(43), duration_ms: None },
        )
        .unwrap();
        assert_eq!(overridden.sim.seed, 43);
        assert_eq!(overridden.arrivals, c.arrivals);
    }

    #[test]
    fn csv_traces_resolve_relative_to_the_scenario_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("traces")).unwrap();
        write_file(
            dir.path(),
            "traces/cam0.csv",
            "timestamp_ms,count\n0,1\n500,2\n",
        );
        let toml = SCENARIO.replace(
            "rate_qps = 15.0\nsurge = { amplitude = 1.0, period_ms = 8000.0, duty = 0.25 }",
            "csv = \"traces/cam0.csv\"",
        );
        write_file(dir.path(), "latency.csv", PROFILES_LATENCY);
        write_file(dir.path(), "models.csv", PROFILES_MODELS);
        let path = write_file(dir.path(), "scenario.toml", &toml);
        let s = load_scenario(&path).unwrap();
        assert_eq!(s.arrivals["cam0"].events.len(), 2);
        assert_eq!(s.arrivals["cam0"].events[1].count, 2);
    }

    #[test]
    fn unknown_keys_and_ambiguous_sources_are_structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "latency.csv", PROFILES_LATENCY);
        write_file(dir.path(), "models.csv", PROFILES_MODELS);

        let typo = SCENARIO.replace("slo_ms = 200.0", "slo_millis = 200.0");
        let path = write_file(dir.path(), "scenario.toml", &typo);
        assert!(matches!(load_scenario(&path), Err(ScenarioError::Toml { .. })));

        let both = SCENARIO.replace(
            "rate_qps = 15.0",
            "rate_qps = 15.0\ncsv = \"traces/cam0.csv\"",
        );
        let path = write_file(dir.path(), "scenario.toml", &both);
        let err = load_scenario(&path).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid { .. }), "{err}");
        assert!(err.to_string().contains("exactly one"));
    }

    #[test]
    fn validation_reports_semantic_issues_with_codes() {
        let dir = tempfile::tempdir().unwrap();
        let broken = SCENARIO
            .replace("source_device = \"edge0\"", "source_device = \"ghost\"")
            .replace("pipeline = \"cam0\"", "pipeline = \"cam9\"");
        write_file(dir.path(), "latency.csv", PROFILES_LATENCY);
        write_file(dir.path(), "models.csv", PROFILES_MODELS);
        let path = write_file(dir.path(), "scenario.toml", &broken);
        let s = load_scenario(&path).unwrap();
        let issues = validate_scenario(&s);
        let codes: BTreeSet<&str> = issues.iter().map(|i| i.code.as_str()).collect();
        assert!(codes.contains("unknown_device"), "{issues:?}");
        assert!(codes.contains("missing_arrivals"), "{issues:?}");
        assert!(codes.contains("orphan_arrival"), "{issues:?}");
    }
}
