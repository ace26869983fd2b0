//! Command-line front end for the `edgeserve` simulator: run a single
//! scheduling policy over a scenario file, compare several policies across
//! seeds, validate scenario files, and materialize generated traces as CSV.
//!
//! Exit codes: 0 on success, 2 when the scenario file is structurally or
//! semantically invalid (the issues are printed to stdout as JSON), 1 for
//! operational failures such as an unwritable output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use edgeserve::policies::{all_policies, policy_by_name, SchedulingPolicy};
use edgeserve::scenario::{
    load_scenario_with, validate_scenario, Scenario, ScenarioIssue, ScenarioOverrides,
};
use edgeserve::simengine::{run_simulation, SimInputs, SimOutput, SimReport};
use edgeserve::traces::{write_arrival_csv, write_bandwidth_csv};

// ── Argument surface ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "edgeserve",
    version,
    about = "Trace-driven scheduling simulator for edge video-analytics inference serving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one policy over a scenario and write its reports.
    Run(RunArgs),
    /// Simulate several policies (and seeds) and write a comparison.
    Compare(CompareArgs),
    /// Check a scenario file; issues are printed to stdout as JSON.
    Validate(ValidateArgs),
    /// Materialize a scenario's arrival and bandwidth traces as CSV files.
    GenTraces(GenTracesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Scheduling policy to run.
    #[arg(long, default_value = "octopinf")]
    policy: String,
    /// Directory for report.json, timeseries.csv, placement.json, run.log.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed (also reseeds generated traces).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulated duration in milliseconds.
    #[arg(long)]
    duration_ms: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated policies (defaults to every built-in policy).
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    /// Comma-separated seeds (defaults to the scenario's own seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Directory for compare.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the simulated duration in milliseconds.
    #[arg(long)]
    duration_ms: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Args)]
struct GenTracesArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Directory for the materialized CSV files.
    #[arg(long)]
    out: PathBuf,
}

// ── Entry point ─────────────────────────────────────────────────────────

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate(args) => cmd_validate(args),
        Command::GenTraces(args) => cmd_gen_traces(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

/// Loads a scenario, folding structural file errors into the same
/// machine-readable issue shape the validator uses.
fn load_checked(
    path: &Path,
    overrides: ScenarioOverrides,
) -> Result<Scenario, Vec<ScenarioIssue>> {
    load_scenario_with(path, overrides).map_err(|e| {
        vec![ScenarioIssue { code: "structure".into(), detail: e.to_string() }]
    })
}

/// Prints issues as a JSON array on stdout and returns the exit code.
fn report_issues(issues: &[ScenarioIssue]) -> Result<i32> {
    println!("{}", serde_json::to_string_pretty(issues)?);
    eprintln!("scenario has {} issue(s)", issues.len());
    Ok(2)
}

fn resolve_policy(name: &str) -> Result<SchedulingPolicy> {
    policy_by_name(name).with_context(|| {
        let known: Vec<String> =
            all_policies().into_iter().map(|p| p.name).collect();
        format!("unknown policy {name:?} (known: {})", known.join(", "))
    })
}

fn simulate(scenario: &Scenario, policy: &SchedulingPolicy) -> SimOutput {
    run_simulation(&SimInputs {
        policy,
        cluster: &scenario.cluster,
        pipelines: &scenario.pipelines,
        profiles: &scenario.profiles,
        arrivals: &scenario.arrivals,
        bandwidth: &scenario.bandwidth,
        config: &scenario.sim,
    })
}

// ── run ─────────────────────────────────────────────────────────────────

fn cmd_run(args: RunArgs) -> Result<i32> {
    let overrides =
        ScenarioOverrides { seed: args.seed, duration_ms: args.duration_ms };
    let scenario = match load_checked(&args.scenario, overrides) {
        Ok(s) => s,
        Err(issues) => return report_issues(&issues),
    };
    let issues = validate_scenario(&scenario);
    if !issues.is_empty() {
        return report_issues(&issues);
    }
    let policy = resolve_policy(&args.policy)?;

    let output = simulate(&scenario, &policy);
    write_run_outputs(&args.out, &output)
        .with_context(|| format!("writing reports to {}", args.out.display()))?;

    let r = &output.report;
    println!(
        "{} on {}: {:.2} q/s effective of {:.2} total (goodput {:.3}), \
         p50 {:.1} ms, p99 {:.1} ms, {} dropped, peak mem {:.0} MiB",
        r.policy,
        scenario.name,
        r.effective_throughput_qps,
        r.total_throughput_qps,
        r.goodput_ratio,
        r.latency.p50_ms,
        r.latency.p99_ms,
        r.totals.dropped_units,
        r.peak_total_mem_mib,
    );
    println!("reports written to {}", args.out.display());
    Ok(0)
}

fn write_run_outputs(dir: &Path, output: &SimOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &output.report)?;
    write_json(&dir.join("placement.json"), &output.placement)?;
    fs::write(dir.join("run.log"), output.log.join("\n") + "\n")?;

    let mut wtr = csv::Writer::from_path(dir.join("timeseries.csv"))?;
    for row in &output.timeseries {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    policy: String,
    seed: u64,
    effective_throughput_qps: f64,
    total_throughput_qps: f64,
    goodput_ratio: f64,
    p50_ms: f64,
    p99_ms: f64,
    dropped_units: u64,
    late_completions: u64,
    peak_total_mem_mib: f64,
    inflated_batches: u64,
    scale_ups: u32,
    scale_downs: u32,
}

impl CompareRow {
    fn from_report(r: &SimReport) -> Self {
        Self {
            policy: r.policy.clone(),
            seed: r.seed,
            effective_throughput_qps: r.effective_throughput_qps,
            total_throughput_qps: r.total_throughput_qps,
            goodput_ratio: r.goodput_ratio,
            p50_ms: r.latency.p50_ms,
            p99_ms: r.latency.p99_ms,
            dropped_units: r.totals.dropped_units,
            late_completions: r.totals.late_completions,
            peak_total_mem_mib: r.peak_total_mem_mib,
            inflated_batches: r.inflated_batches,
            scale_ups: r.scale_ups,
            scale_downs: r.scale_downs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct PolicySummary {
    policy: String,
    mean_effective_qps: f64,
    mean_total_qps: f64,
    mean_goodput: f64,
    mean_p99_ms: f64,
    mean_peak_mem_mib: f64,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    scenario: String,
    seeds: Vec<u64>,
    rows: Vec<CompareRow>,
    summary: Vec<PolicySummary>,
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let policies: Vec<SchedulingPolicy> = if args.policies.is_empty() {
        all_policies()
    } else {
        args.policies
            .iter()
            .map(|n| resolve_policy(n))
            .collect::<Result<_>>()?
    };

    // One scenario per seed, loaded up front so a reseeded generator trace
    // is shared by every policy at that seed.
    let mut scenarios: Vec<(u64, Scenario)> = Vec::new();
    if args.seeds.is_empty() {
        let overrides =
            ScenarioOverrides { seed: None, duration_ms: args.duration_ms };
        match load_checked(&args.scenario, overrides) {
            Ok(s) => scenarios.push((s.sim.seed, s)),
            Err(issues) => return report_issues(&issues),
        }
    } else {
        for &seed in &args.seeds {
            let overrides = ScenarioOverrides {
                seed: Some(seed),
                duration_ms: args.duration_ms,
            };
            match load_checked(&args.scenario, overrides) {
                Ok(s) => scenarios.push((seed, s)),
                Err(issues) => return report_issues(&issues),
            }
        }
    }
    let issues = validate_scenario(&scenarios[0].1);
    if !issues.is_empty() {
        return report_issues(&issues);
    }

    let jobs: Vec<(&SchedulingPolicy, &Scenario)> = policies
        .iter()
        .flat_map(|p| scenarios.iter().map(move |(_, s)| (p, s)))
        .collect();
    let rows: Vec<CompareRow> = jobs
        .par_iter()
        .map(|(policy, scenario)| {
            CompareRow::from_report(&simulate(scenario, policy).report)
        })
        .collect();

    let summary: Vec<PolicySummary> = policies
        .iter()
        .map(|p| {
            let mine: Vec<&CompareRow> =
                rows.iter().filter(|r| r.policy == p.name).collect();
            let mean = |f: &dyn Fn(&CompareRow) -> f64| {
                mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64
            };
            PolicySummary {
                policy: p.name.clone(),
                mean_effective_qps: mean(&|r| r.effective_throughput_qps),
                mean_total_qps: mean(&|r| r.total_throughput_qps),
                mean_goodput: mean(&|r| r.goodput_ratio),
                mean_p99_ms: mean(&|r| r.p99_ms),
                mean_peak_mem_mib: mean(&|r| r.peak_total_mem_mib),
            }
        })
        .collect();

    let report = CompareReport {
        scenario: scenarios[0].1.name.clone(),
        seeds: scenarios.iter().map(|(seed, _)| *seed).collect(),
        rows,
        summary,
    };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("compare.json"), &report)
        .with_context(|| format!("writing reports to {}", args.out.display()))?;

    print_compare(&report);
    println!("comparison written to {}", args.out.display());
    Ok(0)
}

fn print_compare(report: &CompareReport) {
    println!(
        "{:<14} {:>6} {:>9} {:>9} {:>8} {:>9} {:>9} {:>8} {:>10} {:>9}",
        "policy",
        "seed",
        "eff q/s",
        "tot q/s",
        "goodput",
        "p50 ms",
        "p99 ms",
        "dropped",
        "peak MiB",
        "inflated"
    );
    for r in &report.rows {
        println!(
            "{:<14} {:>6} {:>9.2} {:>9.2} {:>8.3} {:>9.1} {:>9.1} {:>8} {:>10.0} {:>9}",
            r.policy,
            r.seed,
            r.effective_throughput_qps,
            r.total_throughput_qps,
            r.goodput_ratio,
            r.p50_ms,
            r.p99_ms,
            r.dropped_units,
            r.peak_total_mem_mib,
            r.inflated_batches
        );
    }
    println!("\nmean over {} seed(s):", report.seeds.len());
    for s in &report.summary {
        println!(
            "{:<14} eff {:>8.2} q/s   goodput {:>6.3}   p99 {:>8.1} ms   peak mem {:>8.0} MiB",
            s.policy, s.mean_effective_qps, s.mean_goodput, s.mean_p99_ms, s.mean_peak_mem_mib
        );
    }
}

// ── validate ────────────────────────────────────────────────────────────

fn cmd_validate(args: ValidateArgs) -> Result<i32> {
    let scenario =
        match load_checked(&args.scenario, ScenarioOverrides::default()) {
            Ok(s) => s,
            Err(issues) => return report_issues(&issues),
        };
    let issues = validate_scenario(&scenario);
    if !issues.is_empty() {
        return report_issues(&issues);
    }
    println!("[]");
    eprintln!(
        "{}: ok ({} device(s), {} pipeline(s), {} arrival trace(s))",
        scenario.name,
        scenario.cluster.devices.len(),
        scenario.pipelines.len(),
        scenario.arrivals.len(),
    );
    Ok(0)
}

// ── gen-traces ──────────────────────────────────────────────────────────

fn cmd_gen_traces(args: GenTracesArgs) -> Result<i32> {
    let scenario =
        match load_checked(&args.scenario, ScenarioOverrides::default()) {
            Ok(s) => s,
            Err(issues) => return report_issues(&issues),
        };
    if scenario.arrivals.is_empty() && scenario.bandwidth.is_empty() {
        bail!("scenario defines no arrival or bandwidth traces");
    }
    fs::create_dir_all(&args.out)?;
    for (pipeline, trace) in &scenario.arrivals {
        let path = args.out.join(format!("arrival_{pipeline}.csv"));
        write_arrival_csv(trace, &path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for ((from, to), trace) in &scenario.bandwidth {
        let path = args.out.join(format!("bandwidth_{from}_{to}.csv"));
        write_bandwidth_csv(trace, &path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "wrote {} arrival and {} bandwidth trace(s) to {}",
        scenario.arrivals.len(),
        scenario.bandwidth.len(),
        args.out.display(),
    );
    Ok(0)
}
