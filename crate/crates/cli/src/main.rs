mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ecbf_swarm::bounds::Threshold;
use ecbf_swarm::ecbf::{validate_initial_conditions, EcbfError};
use ecbf_swarm::sim::campaign::{write_sweep_csv, CampaignError, SWEEP_CSV_SCHEMA_VERSION};
use ecbf_swarm::sim::trace::{DISTANCE_CSV_SCHEMA_VERSION, TRACE_SCHEMA_VERSION};
use ecbf_swarm::sim::violations::VIOLATION_CSV_SCHEMA_VERSION;
use ecbf_swarm::sim::{apply_regime, generate_scenario, sweep_campaign, Regime, SimError, SweepCell};
use ecbf_swarm::{
    conservative_bound, discretize_bound, min_range_oracle, nonconservative_bound, run_scenario, RangeBoundInputs, RangeBoundResult,
    RelativeState, SafetyGeometry,
};
use rayon::prelude::*;
use serde::Serialize;

use config::{LoadError, RunConfig};
use manifest::ManifestBuilder;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_GENERATION: u8 = 3;
const EXIT_INVALID_GAINS: u8 = 4;

/// Schema version of the JSON summaries written by this binary.
const SUMMARY_SCHEMA_VERSION: u32 = 1;
const FIG3_CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ecbf-swarm", version, about = "Decentralized ECBF-NMPC swarm experiments")]
struct Cli {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `scenario.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Detection-range regime: inf, nonconservative, r2.0 or restrictive.
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallel: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Minimum detection ranges for the configured vehicle and obstacles.
    Bounds,
    /// Check the ECBF gains and the initial state of every pair.
    ValidateGains,
    /// Analytic bounds and the simulated minimum range versus speed.
    Fig3,
    /// Violation counts over agents, obstacles, regimes and seeds.
    Sweep,
    /// One closed-loop run with full traces.
    Simulate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Bounds => "bounds",
            Command::ValidateGains => "validate-gains",
            Command::Fig3 => "fig3",
            Command::Sweep => "sweep",
            Command::Simulate => "simulate",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LoadError>() {
            return match e {
                LoadError::InvalidGains(_) => EXIT_INVALID_GAINS,
                LoadError::Io { .. } | LoadError::Invalid(_) => EXIT_CONFIG,
            };
        }
        if let Some(EcbfError::InvalidGains { .. }) = cause.downcast_ref::<EcbfError>() {
            return EXIT_INVALID_GAINS;
        }
        let sim = cause.downcast_ref::<SimError>().or_else(|| match cause.downcast_ref::<CampaignError>() {
            Some(CampaignError::Run { source, .. }) => Some(source),
            _ => None,
        });
        match sim {
            Some(SimError::Config(_)) => return EXIT_CONFIG,
            Some(SimError::Generation(_)) => return EXIT_GENERATION,
            _ => {}
        }
        if cause.downcast_ref::<ConfigRejected>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_FAILURE
}

/// A configuration that parses but cannot be run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigRejected(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, env_overrides) = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    let command = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(command));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let threads = cli.parallel as usize;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let mut manifest = ManifestBuilder::start(command, cli.config.as_deref(), env_overrides, &out, threads, cfg.clone());
    let ctx = Ctx { out: &out, parallel: threads > 1, regime: cli.regime };

    pool.install(|| match cli.command {
        Command::Bounds => cmd_bounds(&cfg, &ctx, &mut manifest),
        Command::ValidateGains => cmd_validate_gains(&cfg, &ctx, &mut manifest),
        Command::Fig3 => cmd_fig3(&cfg, &ctx, &mut manifest),
        Command::Sweep => cmd_sweep(&cfg, &ctx, &mut manifest),
        Command::Simulate => cmd_simulate(&cfg, &ctx, &mut manifest),
    })?;
    manifest.finish()?;
    Ok(())
}

struct Ctx<'a> {
    out: &'a Path,
    parallel: bool,
    regime: Option<Regime>,
}

impl Ctx<'_> {
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn versioned<T>(body: T) -> Versioned<T> {
    Versioned { schema_version: SUMMARY_SCHEMA_VERSION, body }
}

#[derive(Serialize)]
struct BoundRow {
    pair: String,
    kind: &'static str,
    v_rel_max: f64,
    safety_distance: f64,
    #[serde(flatten)]
    result: RangeBoundResult,
    discretized: f64,
}

fn bound_rows(label: &str, input: &RangeBoundInputs, dt: f64) -> Result<Vec<BoundRow>> {
    let mut rows = Vec::new();
    for (kind, result) in [("conservative", conservative_bound(input)?), ("nonconservative", nonconservative_bound(input)?)] {
        rows.push(BoundRow {
            pair: label.to_string(),
            kind,
            v_rel_max: input.v_rel_max,
            safety_distance: input.geom.safety_distance(),
            result,
            discretized: discretize_bound(result.bound, dt, input.v_rel_max),
        });
    }
    Ok(rows)
}

fn cmd_bounds(cfg: &RunConfig, ctx: &Ctx, manifest: &mut ManifestBuilder) -> Result<()> {
    let s = &cfg.scenario;
    let p = &s.params;
    let dt = s.control_dt;
    let mut rows = bound_rows("agent-agent", &RangeBoundInputs::vehicle_pair(s.gains, s.margins.d_s, p.radius, p.a_max, p.v_max), dt)?;
    let mut radii = s.obstacle_radius.to_vec();
    if let ecbf_swarm::sim::Layout::Explicit { obstacles, .. } = &s.layout {
        radii = obstacles.iter().map(|o| o.radius).collect();
    }
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    for r_o in radii {
        let input = RangeBoundInputs::static_obstacle(s.gains, s.margins.d_so, p.radius, r_o, p.a_max, p.v_max);
        rows.extend(bound_rows(&format!("agent-obstacle r_o={r_o}"), &input, dt)?);
    }

    println!("{:<26} {:<16} {:>9} {:>9} {:>9} {:>11}", "pair", "kind", "R_i", "R_ii", "bound", "discretized");
    for r in &rows {
        let fmt = |t: Threshold| t.value().map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<26} {:<16} {:>9} {:>9} {:>9.4} {:>11.4}",
            r.pair,
            r.kind,
            fmt(r.result.threshold_i),
            fmt(r.result.threshold_ii),
            r.result.bound,
            r.discretized
        );
    }
    ctx.write_json("bounds.json", &versioned(serde_json::json!({ "rows": rows })))?;
    manifest.output("bounds.json", SUMMARY_SCHEMA_VERSION);
    Ok(())
}

#[derive(Serialize)]
struct PairCheck {
    pair: String,
    distance: f64,
    nu0: f64,
    nu1: f64,
    in_c0: bool,
    in_c1: bool,
    on_boundary: bool,
}

fn cmd_validate_gains(cfg: &RunConfig, ctx: &Ctx, manifest: &mut ManifestBuilder) -> Result<()> {
    let s = &cfg.scenario;
    let g = s.gains;
    println!("alpha1 = {}, alpha2 = {}: valid, poles -{:.4} and -{:.4}", g.alpha1, g.alpha2, g.p1, g.p2);

    let world = generate_scenario(s)?;
    let r_q = s.params.radius;
    let mut checks = Vec::new();
    for (i, a) in world.agents.iter().enumerate() {
        for b in &world.agents[i + 1..] {
            let rel = RelativeState::between(&a.state.p, &a.state.v, &b.state.p, &b.state.v);
            let rep = validate_initial_conditions(&rel, &SafetyGeometry::new(s.margins.d_s, r_q, r_q), &g);
            checks.push(check(format!("agent {} / agent {}", a.id, b.id), rel.distance(), rep));
        }
        for o in &world.obstacles {
            let rel = RelativeState::between(&a.state.p, &a.state.v, &o.center, &nalgebra::Vector3::zeros());
            let rep = validate_initial_conditions(&rel, &SafetyGeometry::new(s.margins.d_so, r_q, o.radius), &g);
            checks.push(check(format!("agent {} / obstacle {}", a.id, o.id), rel.distance(), rep));
        }
    }
    for c in checks.iter().filter(|c| c.on_boundary) {
        eprintln!("warning: {} starts on the boundary of the safe set", c.pair);
    }
    let bad: Vec<&PairCheck> = checks.iter().filter(|c| !(c.in_c0 && c.in_c1)).collect();
    for c in &bad {
        eprintln!("{}: outside the safe set (nu0 = {:.4}, nu1 = {:.4})", c.pair, c.nu0, c.nu1);
    }
    println!("{} pairs checked, {} outside the safe set", checks.len(), bad.len());
    let n_bad = bad.len();
    ctx.write_json(
        "gains_report.json",
        &versioned(serde_json::json!({ "alpha1": g.alpha1, "alpha2": g.alpha2, "p1": g.p1, "p2": g.p2, "pairs": checks })),
    )?;
    manifest.output("gains_report.json", SUMMARY_SCHEMA_VERSION);
    if n_bad > 0 {
        return Err(ConfigRejected(format!("{n_bad} pairs start outside the safe set")).into());
    }
    Ok(())
}

fn check(pair: String, distance: f64, rep: ecbf_swarm::ecbf::InitialConditionReport) -> PairCheck {
    PairCheck { pair, distance, nu0: rep.nu0, nu1: rep.nu1, in_c0: rep.in_c0, in_c1: rep.in_c1, on_boundary: rep.on_boundary }
}

fn cmd_fig3(cfg: &RunConfig, ctx: &Ctx, manifest: &mut ManifestBuilder) -> Result<()> {
    let s = &cfg.scenario;
    let p = &s.params;
    let swap = cfg.fig3.swap_scenario(s);
    let tolerance = cfg.fig3.tolerance;
    let point = |&v: &f64| -> Result<(f64, f64, f64, ecbf_swarm::OracleResult)> {
        let input = RangeBoundInputs::vehicle_pair(s.gains, s.margins.d_s, p.radius, p.a_max, v);
        let cons = discretize_bound(conservative_bound(&input)?.bound, s.control_dt, input.v_rel_max);
        let noncons = discretize_bound(nonconservative_bound(&input)?.bound, s.control_dt, input.v_rel_max);
        let oracle = min_range_oracle(v, &swap, tolerance)?;
        Ok((v, cons, noncons, oracle))
    };
    let points: Vec<_> = if ctx.parallel {
        cfg.fig3.v_max.par_iter().map(point).collect::<Result<_>>()?
    } else {
        cfg.fig3.v_max.iter().map(point).collect::<Result<_>>()?
    };

    let mut csv = csv::Writer::from_writer(ctx.create("fig3.csv")?);
    csv.write_record(["v_max", "conservative_discrete", "nonconservative_discrete", "oracle"])?;
    println!("{:>6} {:>12} {:>15} {:>8}", "v_max", "conservative", "nonconservative", "oracle");
    for (v, cons, noncons, oracle) in &points {
        csv.write_record(&[v.to_string(), format!("{cons:.6}"), format!("{noncons:.6}"), format!("{:.6}", oracle.min_safe_range)])?;
        println!("{v:>6.2} {cons:>12.4} {noncons:>15.4} {:>8.4}", oracle.min_safe_range);
    }
    csv.flush()?;
    manifest.output("fig3.csv", FIG3_CSV_SCHEMA_VERSION);

    let oracles: Vec<_> = points.into_iter().map(|(.., o)| o).collect();
    ctx.write_json("fig3_oracle.json", &versioned(serde_json::json!({ "tolerance": tolerance, "points": oracles })))?;
    manifest.output("fig3_oracle.json", SUMMARY_SCHEMA_VERSION);
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, ctx: &Ctx, manifest: &mut ManifestBuilder) -> Result<()> {
    let sw = &cfg.sweep;
    let regimes: Vec<Regime> = match ctx.regime {
        Some(r) => vec![r],
        None => sw.regimes.clone(),
    };
    let mut cells = Vec::new();
    for &n_agents in &sw.n_agents {
        for &n_obstacles in &sw.n_obstacles {
            for &regime in &regimes {
                cells.push(SweepCell { n_agents, n_obstacles, regime });
            }
        }
    }
    if cells.is_empty() || sw.seeds == 0 {
        bail!(ConfigRejected("the sweep has no cells or no seeds".into()));
    }
    let seed0 = cfg.scenario.seed;
    let seeds: Vec<u64> = (seed0..seed0 + sw.seeds).collect();
    let rows = sweep_campaign(&cfg.scenario, &cells, &seeds, ctx.parallel)?;

    let mut w = ctx.create("sweep.csv")?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    manifest.output("sweep.csv", SWEEP_CSV_SCHEMA_VERSION);
    ctx.write_json("sweep.json", &versioned(serde_json::json!({ "seeds": seeds, "cells": rows })))?;
    manifest.output("sweep.json", SUMMARY_SCHEMA_VERSION);

    println!("{:>3} {:>4} {:<16} {:>10}", "N", "N_o", "regime", "violations");
    for r in &rows {
        println!("{:>3} {:>4} {:<16} {:>10}", r.n_agents, r.n_obstacles, r.regime.to_string(), r.violations);
    }
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, ctx: &Ctx, manifest: &mut ManifestBuilder) -> Result<()> {
    let scenario = match ctx.regime {
        Some(r) => apply_regime(&cfg.scenario, r)?,
        None => cfg.scenario.clone(),
    };
    let outcome = run_scenario(&scenario, ctx.parallel)?;

    let mut w = ctx.create("trace.ndjson")?;
    outcome.trace.write_ndjson(&mut w)?;
    w.flush()?;
    manifest.output("trace.ndjson", TRACE_SCHEMA_VERSION);

    let mut w = ctx.create("distances.csv")?;
    outcome.trace.write_distance_csv(&mut w)?;
    w.flush()?;
    manifest.output("distances.csv", DISTANCE_CSV_SCHEMA_VERSION);

    let mut w = ctx.create("violations.csv")?;
    outcome.report.write_csv(&mut w)?;
    w.flush()?;
    manifest.output("violations.csv", VIOLATION_CSV_SCHEMA_VERSION);

    let fingerprint = outcome.trace.fingerprint();
    ctx.write_json(
        "report.json",
        &versioned(serde_json::json!({
            "agent_range": range_json(scenario.agent_range),
            "obstacle_range": range_json(scenario.obstacle_range),
            "completed": outcome.completed,
            "fingerprint": fingerprint,
            "report": outcome.report,
        })),
    )?;
    manifest.output("report.json", SUMMARY_SCHEMA_VERSION);

    let r = &outcome.report;
    println!(
        "violations: {} ({} agent-agent, {} agent-obstacle); min agent distance {:.4} m; min obstacle clearance {:.4} m; completed: {}",
        r.total_count,
        r.agent_agent_events.len(),
        r.agent_obstacle_events.len(),
        r.min_agent_distance,
        r.min_obstacle_clearance,
        outcome.completed
    );
    println!("fingerprint: {fingerprint}");
    Ok(())
}

fn range_json(r: f64) -> serde_json::Value {
    if r.is_finite() {
        r.into()
    } else {
        "inf".into()
    }
}
