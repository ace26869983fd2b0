//! End-to-end tests driving the compiled `edgeserve` binary: report files,
//! exit codes, JSON issue output, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::Output;

const LATENCY: &str = "model_id,device_class,batch_size,latency_ms,util,intermediate_mib\n\
                       det,server_gpu,1,12,0.20,40\n\
                       det,server_gpu,2,18,0.20,60\n\
                       det,server_gpu,4,28,0.20,100\n\
                       det,server_gpu,8,44,0.20,160\n\
                       det,agx,1,35,0.40,40\n\
                       det,agx,2,52,0.40,60\n\
                       det,agx,4,82,0.40,100\n\
                       det,agx,8,130,0.40,160\n\
                       cls,server_gpu,1,5,0.10,10\n\
                       cls,server_gpu,2,7,0.10,14\n\
                       cls,server_gpu,4,11,0.10,22\n\
                       cls,server_gpu,8,17,0.10,38\n\
                       cls,agx,1,12,0.20,10\n\
                       cls,agx,2,18,0.20,14\n\
                       cls,agx,4,28,0.20,22\n\
                       cls,agx,8,44,0.20,38\n";

const MODELS: &str = "model_id,weight_mib,in_bytes,out_bytes,fanout\n\
                      det,800,150000,4000,1.0\n\
                      cls,300,4000,200,1.0\n";

const SCENARIO: &str = r#"
name = "mini"
description = "two-stage smoke scenario"
server_device = "server"

[sim]
duration_ms = 8000
scheduler_period_ms = 4000
seed = 42

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
rate_qps = 12.0
surge = { amplitude = 1.0, period_ms = 4000.0, duty = 0.25 }

[[bandwidth]]
from = "edge0"
to = "server"
base_bytes_per_sec = 2.5e6
dip = { low_bytes_per_sec = 500000.0, period_ms = 5000.0, duty = 0.2 }
"#;

fn write_fixture(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("latency.csv"), LATENCY).unwrap();
    std::fs::write(dir.join("models.csv"), MODELS).unwrap();
    let path = dir.join("scenario.toml");
    std::fs::write(&path, SCENARIO).unwrap();
    path
}

fn edgeserve(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_edgeserve"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

// ── run ─────────────────────────────────────────────────────────────────

#[test]
fn run_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());
    let out_dir = dir.path().join("out");

    let out = edgeserve(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--policy",
        "octopinf",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("octopinf on mini"));

    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["policy"], "octopinf");
    assert_eq!(report["seed"], 42);
    let arrivals = report["totals"]["source_arrivals"].as_u64().unwrap();
    assert!(arrivals > 0);
    let accounted = report["totals"]["completions"].as_u64().unwrap()
        + report["totals"]["dropped_units"].as_u64().unwrap()
        + report["in_flight_units"].as_u64().unwrap();
    assert_eq!(arrivals, accounted, "every unit is accounted for");

    let placement = json(&out_dir.join("placement.json"));
    assert!(placement["gpus"].is_object());

    let ts = std::fs::read_to_string(out_dir.join("timeseries.csv")).unwrap();
    assert_eq!(ts.lines().count(), 9, "header + one row per second");
    assert!(ts.starts_with("time_ms,"));

    let log = std::fs::read_to_string(out_dir.join("run.log")).unwrap();
    assert!(!log.trim().is_empty());
}

#[test]
fn run_is_deterministic_and_the_seed_flag_reshapes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());
    let run = |seed: &str, name: &str| -> (String, String) {
        let out_dir = dir.path().join(name);
        let out = edgeserve(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--policy",
            "no_coral",
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        (
            std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
            std::fs::read_to_string(out_dir.join("timeseries.csv")).unwrap(),
        )
    };

    let first = run("1", "a");
    let repeat = run("1", "b");
    assert_eq!(first, repeat, "same seed, byte-identical outputs");

    let other = run("2", "c");
    assert_ne!(first.0, other.0, "the seed flag must reshape generated arrivals");
}

// ── compare ─────────────────────────────────────────────────────────────

#[test]
fn compare_covers_every_policy_and_seed_pair() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());
    let out_dir = dir.path().join("cmp");

    let out = edgeserve(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--policies",
        "octopinf,no_coral,static_batch",
        "--seeds",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("policy"));
    assert!(text.contains("mean over 2 seed(s)"));

    let cmp = json(&out_dir.join("compare.json"));
    assert_eq!(cmp["scenario"], "mini");
    assert_eq!(cmp["seeds"], serde_json::json!([1, 2]));
    let rows = cmp["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6, "three policies x two seeds");
    // Policy-major ordering, seeds inside.
    assert_eq!(rows[0]["policy"], "octopinf");
    assert_eq!(rows[0]["seed"], 1);
    assert_eq!(rows[1]["policy"], "octopinf");
    assert_eq!(rows[1]["seed"], 2);
    assert_eq!(rows[2]["policy"], "no_coral");
    assert_eq!(cmp["summary"].as_array().unwrap().len(), 3);

    // A second invocation reproduces the file byte for byte.
    let bytes = std::fs::read(out_dir.join("compare.json")).unwrap();
    let out2 = edgeserve(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--policies",
        "octopinf,no_coral,static_batch",
        "--seeds",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(0));
    assert_eq!(bytes, std::fs::read(out_dir.join("compare.json")).unwrap());
}

#[test]
fn compare_rejects_unknown_policies() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());
    let out = edgeserve(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--policies",
        "octopinf,mystery",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("unknown policy"), "stderr: {err}");
    assert!(err.contains("octopinf"), "stderr lists the known names: {err}");
}

// ── validate ────────────────────────────────────────────────────────────

#[test]
fn validate_distinguishes_clean_semantic_and_structural_failures() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());

    let ok = edgeserve(&["validate", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout(&ok).trim(), "[]");

    // Semantic: the pipeline sources from a device that does not exist.
    let broken = SCENARIO.replace("source_device = \"edge0\"", "source_device = \"ghost\"");
    let broken_path = dir.path().join("broken.toml");
    std::fs::write(&broken_path, broken).unwrap();
    let bad = edgeserve(&["validate", "--scenario", broken_path.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    let issues: serde_json::Value = serde_json::from_str(&stdout(&bad)).unwrap();
    let codes: Vec<&str> =
        issues.as_array().unwrap().iter().map(|i| i["code"].as_str().unwrap()).collect();
    assert!(codes.contains(&"unknown_device"), "codes: {codes:?}");

    // Structural: a typoed key never reaches semantic validation.
    let typo = SCENARIO.replace("slo_ms", "slo_millis");
    let typo_path = dir.path().join("typo.toml");
    std::fs::write(&typo_path, typo).unwrap();
    let bad = edgeserve(&["validate", "--scenario", typo_path.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    let issues: serde_json::Value = serde_json::from_str(&stdout(&bad)).unwrap();
    assert_eq!(issues[0]["code"], "structure");
}

#[test]
fn run_refuses_an_invalid_scenario_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let broken = SCENARIO.replace("source_device = \"edge0\"", "source_device = \"ghost\"");
    let broken_path = dir.path().join("broken.toml");
    std::fs::write(&broken_path, broken).unwrap();

    let out = edgeserve(&[
        "run",
        "--scenario",
        broken_path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists(), "nothing is written for a bad scenario");
    let issues: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(!issues.as_array().unwrap().is_empty());
}

// ── gen-traces ──────────────────────────────────────────────────────────

#[test]
fn gen_traces_materializes_deterministic_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_fixture(dir.path());
    let gen = |name: &str| -> PathBuf {
        let out_dir = dir.path().join(name);
        let out = edgeserve(&[
            "gen-traces",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        out_dir
    };

    let a = gen("t1");
    let arrivals = std::fs::read_to_string(a.join("arrival_cam0.csv")).unwrap();
    assert!(arrivals.starts_with("timestamp_ms,count"));
    assert!(arrivals.lines().count() > 10, "eight seconds at 12 q/s");
    let bw = std::fs::read_to_string(a.join("bandwidth_edge0_server.csv")).unwrap();
    assert!(bw.starts_with("timestamp_ms,bytes_per_sec"));

    let b = gen("t2");
    assert_eq!(
        std::fs::read(a.join("arrival_cam0.csv")).unwrap(),
        std::fs::read(b.join("arrival_cam0.csv")).unwrap(),
        "materialization is reproducible"
    );

    // The materialized trace pins the scenario: swapping the generator for
    // the CSV yields the same simulation input.
    let pinned = SCENARIO.replace(
        "rate_qps = 12.0\nsurge = { amplitude = 1.0, period_ms = 4000.0, duty = 0.25 }",
        &format!("csv = \"{}\"", a.join("arrival_cam0.csv").display()),
    );
    let pinned_path = dir.path().join("pinned.toml");
    std::fs::write(&pinned_path, pinned).unwrap();
    let check = edgeserve(&["validate", "--scenario", pinned_path.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(0));
}
