//! Simulation-based minimum detection range for a head-on swap.
//!
//! The oracle never looks at the closed-form bounds: it bisects on the
//! detection range, running the closed loop for each probe.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::QuadState;
use crate::nmpc::{MinJerkSegment, SolveMode};
use crate::sim::{run_world, Agent, Layout, ScenarioConfig, SimError, World};

/// Two agents flying toward each other along a long straight line, set up so
/// that they are already cruising when they come within detection range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapScenario {
    /// Source of gains, vehicle parameters, margins and solver settings.
    pub base: ScenarioConfig,
    /// Length of each agent's reference line.
    pub line_length: f64,
    /// Initial separation beyond the probed range.
    pub approach_margin: f64,
    /// Simulated time per probe.
    pub duration: f64,
    /// Sideways offset between the two lines (zero for a perfect head-on).
    pub lateral_offset: f64,
    pub altitude: f64,
    /// Largest range tried before giving up on finding a safe upper bracket.
    pub max_range: f64,
}

impl Default for SwapScenario {
    /// Probes run the SQP to convergence (capped at ten iterations per
    /// control step) so that the measured range reflects the controller
    /// rather than single-iteration transients in the deadlock that
    /// follows a perfectly symmetric approach.
    fn default() -> Self {
        let mut base = ScenarioConfig::default();
        base.ocp.mode = SolveMode::Full;
        base.ocp.max_sqp_iters = 10;
        Self {
            base,
            line_length: 40.0,
            approach_margin: 1.0,
            duration: 6.0,
            lateral_offset: 0.0,
            altitude: 1.0,
            max_range: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleProbe {
    pub range: f64,
    pub violated: bool,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub v_max: f64,
    /// Smallest probed range without a violation.
    pub min_safe_range: f64,
    /// Largest probed range with a violation (the safety distance if none).
    pub largest_unsafe_range: f64,
    /// False when even the safety distance itself was safe.
    pub bracketed: bool,
    pub probes: Vec<OracleProbe>,
}

/// Reference time at which the normalized quintic reaches `s`.
fn quintic_time(segment: &MinJerkSegment, s: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let val = mid * mid * mid * (10.0 - 15.0 * mid + 6.0 * mid * mid);
        if val < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) * segment.duration
}

impl SwapScenario {
    pub fn config(&self, v_max: f64, range: f64) -> ScenarioConfig {
        let mut cfg = self.base.clone();
        cfg.params.v_max = v_max;
        cfg.n_agents = 2;
        cfg.n_obstacles = 0;
        cfg.agent_range = range;
        cfg.obstacle_range = f64::INFINITY;
        cfg.sim_duration = self.duration;
        cfg.back_and_forth_cycles = 0;
        let half = self.line_length / 2.0;
        let y = self.lateral_offset / 2.0;
        cfg.layout = Layout::Explicit {
            starts: vec![[-half, -y, self.altitude], [half, y, self.altitude]],
            goals: vec![[half, -y, self.altitude], [-half, y, self.altitude]],
            obstacles: vec![],
        };
        cfg
    }

    /// Initial world with the agents `gap` apart, on their references.
    pub fn world(&self, v_max: f64, gap: f64, cfg: &ScenarioConfig) -> World {
        let half = self.line_length / 2.0;
        let y = self.lateral_offset / 2.0;
        let ends = [
            (Vector3::new(-half, -y, self.altitude), Vector3::new(half, -y, self.altitude)),
            (Vector3::new(half, y, self.altitude), Vector3::new(-half, y, self.altitude)),
        ];
        let mut agents = Vec::with_capacity(2);
        for (id, (from, to)) in ends.into_iter().enumerate() {
            let s = ((self.line_length - gap) / (2.0 * self.line_length)).clamp(0.0, 1.0);
            let seg = if v_max > 0.0 {
                let seg = MinJerkSegment::new(from, to, v_max, Some(cfg.params.a_max));
                let t_start = quintic_time(&seg, s);
                seg.starting_at(-t_start)
            } else {
                // Hovering agents hold their initial position.
                let p = from + (to - from) * s;
                MinJerkSegment { start: p, goal: p, t0: 0.0, duration: 0.0 }
            };
            let r = seg.sample(0.0);
            let p = r.p;
            let state = QuadState { p, v: r.v, ..QuadState::at_rest(p) };
            agents.push(Agent::new(id, state, from, to, seg, &cfg.params));
        }
        World { t: 0.0, step: 0, leg: 0, agents, obstacles: vec![] }
    }

    pub fn probe(&self, v_max: f64, range: f64) -> Result<OracleProbe, SimError> {
        let cfg = self.config(v_max, range);
        cfg.validate()?;
        let world = self.world(v_max, range + self.approach_margin, &cfg);
        let out = run_world(world, &cfg, false)?;
        Ok(OracleProbe { range, violated: out.report.total_count > 0, min_distance: out.report.min_agent_distance })
    }
}

/// Bisects on the detection range until the safe/unsafe bracket is narrower
/// than `tolerance`.
pub fn min_range_oracle(v_max: f64, scenario: &SwapScenario, tolerance: f64) -> Result<OracleResult, SimError> {
    let safety = scenario.base.agent_safety_distance();
    let mut probes = Vec::new();
    let mut lo = safety;
    let first = scenario.probe(v_max, lo)?;
    probes.push(first);
    if !first.violated {
        return Ok(OracleResult { v_max, min_safe_range: lo, largest_unsafe_range: lo, bracketed: false, probes });
    }
    let mut hi = 2.0 * safety;
    loop {
        let p = scenario.probe(v_max, hi)?;
        probes.push(p);
        if !p.violated {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > scenario.max_range {
            return Ok(OracleResult { v_max, min_safe_range: f64::INFINITY, largest_unsafe_range: lo, bracketed: false, probes });
        }
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        let p = scenario.probe(v_max, mid)?;
        probes.push(p);
        if p.violated {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(OracleResult { v_max, min_safe_range: hi, largest_unsafe_range: lo, bracketed: true, probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_gap_is_respected() {
        let sc = SwapScenario::default();
        let cfg = sc.config(1.5, 3.0);
        let w = sc.world(1.5, 4.0, &cfg);
        let d = (w.agents[0].state.p - w.agents[1].state.p).norm();
        assert!((d - 4.0).abs() < 1e-6, "{d}");
        let closing = (w.agents[1].state.v - w.agents[0].state.v).norm();
        assert!(closing > 2.9 && closing <= 3.0 + 1e-9, "{closing}");
    }

    #[test]
    fn static_agents_need_only_the_safety_distance() {
        let r = min_range_oracle(0.0, &SwapScenario::default(), 0.05).unwrap();
        assert!(!r.bracketed);
        assert!((r.min_safe_range - 0.8).abs() < 1e-12);
    }
}
