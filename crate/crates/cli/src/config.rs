//! Run configuration: one TOML file, environment overrides, command-line
//! overrides, in that order of increasing precedence.

use std::path::{Path, PathBuf};

use ecbf_swarm::nmpc::SolveMode;
use ecbf_swarm::sim::Regime;
use ecbf_swarm::{EcbfGains, ScenarioConfig, SwapScenario};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variables starting with this prefix override config keys.
/// Nested keys are joined with `__`, e.g.
/// `ECBF_SWARM_SCENARIO__GAINS__ALPHA1=40`.
pub const ENV_PREFIX: &str = "ECBF_SWARM_";
const ENV_SEPARATOR: &str = "__";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read config {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Invalid(String),
    #[error("{0}")]
    InvalidGains(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig3Config {
    pub v_max: Vec<f64>,
    /// Width of the final safe/unsafe bracket.
    pub tolerance: f64,
    pub line_length: f64,
    pub approach_margin: f64,
    pub duration: f64,
    pub lateral_offset: f64,
    pub altitude: f64,
    pub max_range: f64,
    /// Solver used by the probes; overrides the scenario's setting.
    pub mode: SolveMode,
    pub max_sqp_iters: usize,
}

impl Default for Fig3Config {
    fn default() -> Self {
        let swap = SwapScenario::default();
        Self {
            v_max: vec![0.5, 1.0, 1.5, 2.0],
            tolerance: 0.05,
            line_length: swap.line_length,
            approach_margin: swap.approach_margin,
            duration: swap.duration,
            lateral_offset: swap.lateral_offset,
            altitude: swap.altitude,
            max_range: swap.max_range,
            mode: swap.base.ocp.mode,
            max_sqp_iters: swap.base.ocp.max_sqp_iters,
        }
    }
}

impl Fig3Config {
    pub fn swap_scenario(&self, scenario: &ScenarioConfig) -> SwapScenario {
        let mut base = scenario.clone();
        base.ocp.mode = self.mode;
        base.ocp.max_sqp_iters = self.max_sqp_iters;
        SwapScenario {
            base,
            line_length: self.line_length,
            approach_margin: self.approach_margin,
            duration: self.duration,
            lateral_offset: self.lateral_offset,
            altitude: self.altitude,
            max_range: self.max_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_agents: Vec<usize>,
    pub n_obstacles: Vec<usize>,
    pub regimes: Vec<Regime>,
    /// Seeds `scenario.seed .. scenario.seed + seeds` are run in every cell.
    pub seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { n_agents: vec![2, 5, 10], n_obstacles: vec![0, 5, 10, 20], regimes: Regime::ALL.to_vec(), seeds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub fig3: Fig3Config,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), LoadError> {
        self.scenario.validate().map_err(|e| LoadError::Invalid(e.to_string()))?;
        if self.fig3.v_max.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(LoadError::Invalid("fig3.v_max entries must be finite and nonnegative".into()));
        }
        if !(self.fig3.tolerance > 0.0) || !(self.fig3.duration > 0.0) || self.fig3.max_sqp_iters == 0 {
            return Err(LoadError::Invalid("fig3 tolerance, duration and max_sqp_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Parses an environment value as a TOML value, falling back to a bare
/// string so that `inf` or `nonconservative` need no quoting.
fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `PREFIX_A__B__C=value` style overrides to a raw config table.
/// Returns the dotted keys that were set.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<Vec<String>, LoadError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut applied = Vec::new();
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split(ENV_SEPARATOR).map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(LoadError::Invalid(format!("malformed override variable {key}")));
        }
        let (leaf, parents) = path.split_last().expect("split yields at least one segment");
        let mut node = &mut *table;
        for segment in parents {
            let entry = node.entry(segment.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(LoadError::Invalid(format!("{key}: {segment} is not a table"))),
            };
        }
        node.insert(leaf.clone(), parse_env_value(&raw));
        applied.push(path.join("."));
    }
    Ok(applied)
}

/// Gains are checked separately so that invalid gains get their own exit
/// status rather than a generic parse error.
fn check_gains(table: &toml::Table) -> Result<(), LoadError> {
    let Some(gains) = table.get("scenario").and_then(|s| s.get("gains")) else {
        return Ok(());
    };
    let get = |name: &str| gains.get(name).and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)));
    let defaults = EcbfGains::reference();
    let alpha1 = get("alpha1").unwrap_or(defaults.alpha1);
    let alpha2 = get("alpha2").unwrap_or(defaults.alpha2);
    EcbfGains::new(alpha1, alpha2).map(|_| ()).map_err(|e| LoadError::InvalidGains(e.to_string()))
}

pub fn parse_config<I>(text: &str, vars: I) -> Result<(RunConfig, Vec<String>), LoadError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = toml::from_str(text).map_err(|e| LoadError::Invalid(e.to_string()))?;
    let applied = apply_env_overrides(&mut table, vars)?;
    check_gains(&table)?;
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| LoadError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok((cfg, applied))
}

/// Reads the file (or starts from defaults when `path` is `None`) and applies
/// the process environment.
pub fn load(path: Option<&Path>) -> Result<(RunConfig, Vec<String>), LoadError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| LoadError::Io { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    parse_config(&text, std::env::vars())
}
