//! Barrier violation accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::trace::SimTrace;

pub const VIOLATION_CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    AgentAgent,
    AgentObstacle,
}

/// A pair that dropped below its safety distance. Each pair contributes at
/// most one event per run, stamped at the first offending step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub kind: PairKind,
    /// Agent id.
    pub i: usize,
    /// Agent id or obstacle id, depending on `kind`.
    pub j: usize,
    pub onset_step: usize,
    pub onset_time: f64,
    /// Smallest distance the pair reached over the whole run.
    pub min_distance: f64,
    pub safety_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub agent_agent_events: Vec<ViolationEvent>,
    pub agent_obstacle_events: Vec<ViolationEvent>,
    pub total_count: usize,
    /// Closest approach between any two agents (infinite with one agent).
    pub min_agent_distance: f64,
    /// Closest approach between an agent and an obstacle center.
    pub min_obstacle_distance: f64,
    /// Smallest `distance - safety distance` over agent-obstacle pairs.
    pub min_obstacle_clearance: f64,
    /// Control steps in which some agent held its previous command.
    pub fallback_steps: usize,
}

impl ViolationReport {
    /// Replays the recorded distances. A violation is a distance strictly
    /// below the pair's safety distance.
    pub fn from_trace(trace: &SimTrace) -> Self {
        let cfg = &trace.config;
        let n = trace.n_agents();
        let d_agents = cfg.agent_safety_distance();
        let d_obstacle: Vec<f64> = trace.obstacles.iter().map(|o| cfg.obstacle_safety_distance(o.radius)).collect();
        let n_pairs = n * n.saturating_sub(1) / 2;
        let n_obs = trace.obstacles.len();

        let mut pair_min = vec![f64::INFINITY; n_pairs];
        let mut pair_onset: Vec<Option<(usize, f64)>> = vec![None; n_pairs];
        let mut obs_min = vec![f64::INFINITY; n * n_obs];
        let mut obs_onset: Vec<Option<(usize, f64)>> = vec![None; n * n_obs];
        let mut fallback_steps = 0;

        for s in &trace.steps {
            for (k, d) in s.agent_distances.iter().enumerate() {
                pair_min[k] = pair_min[k].min(*d);
                if *d < d_agents && pair_onset[k].is_none() {
                    pair_onset[k] = Some((s.step, s.t));
                }
            }
            for (k, d) in s.obstacle_distances.iter().enumerate() {
                obs_min[k] = obs_min[k].min(*d);
                if *d < d_obstacle[k % n_obs] && obs_onset[k].is_none() {
                    obs_onset[k] = Some((s.step, s.t));
                }
            }
            if s.solver.iter().any(|st| st.fallback) {
                fallback_steps += 1;
            }
        }

        let mut agent_agent_events = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if let Some((step, t)) = pair_onset[k] {
                    agent_agent_events.push(ViolationEvent {
                        kind: PairKind::AgentAgent,
                        i: trace.agent_ids[i],
                        j: trace.agent_ids[j],
                        onset_step: step,
                        onset_time: t,
                        min_distance: pair_min[k],
                        safety_distance: d_agents,
                    });
                }
                k += 1;
            }
        }
        let mut agent_obstacle_events = Vec::new();
        for (k, onset) in obs_onset.iter().enumerate() {
            if let Some((step, t)) = onset {
                let (i, o) = (k / n_obs, k % n_obs);
                agent_obstacle_events.push(ViolationEvent {
                    kind: PairKind::AgentObstacle,
                    i: trace.agent_ids[i],
                    j: trace.obstacles[o].id,
                    onset_step: *step,
                    onset_time: *t,
                    min_distance: obs_min[k],
                    safety_distance: d_obstacle[o],
                });
            }
        }
        let min_obstacle_clearance = obs_min
            .iter()
            .enumerate()
            .map(|(k, d)| d - d_obstacle[k % n_obs])
            .fold(f64::INFINITY, f64::min);
        Self {
            total_count: agent_agent_events.len() + agent_obstacle_events.len(),
            agent_agent_events,
            agent_obstacle_events,
            min_agent_distance: pair_min.iter().copied().fold(f64::INFINITY, f64::min),
            min_obstacle_distance: obs_min.iter().copied().fold(f64::INFINITY, f64::min),
            min_obstacle_clearance,
            fallback_steps,
        }
    }

    pub fn events(&self) -> impl Iterator<Item = &ViolationEvent> {
        self.agent_agent_events.iter().chain(&self.agent_obstacle_events)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        // Written explicitly so that an empty report still has a header.
        out.write_record(["schema_version", "kind", "i", "j", "onset_step", "onset_time", "min_distance", "safety_distance"])?;
        for e in self.events() {
            let kind = match e.kind {
                PairKind::AgentAgent => "agent-agent",
                PairKind::AgentObstacle => "agent-obstacle",
            };
            out.write_record(&[
                VIOLATION_CSV_SCHEMA_VERSION.to_string(),
                kind.to_string(),
                e.i.to_string(),
                e.j.to_string(),
                e.onset_step.to_string(),
                format!("{:.3}", e.onset_time),
                format!("{:.6}", e.min_distance),
                format!("{:.6}", e.safety_distance),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmpc::SolveStatus;
    use crate::sim::config::ScenarioConfig;
    use crate::sim::trace::{ObstacleRecord, SolverStats, StepRecord};

    fn trace_with(distances: &[(f64, f64)]) -> SimTrace {
        let stats = SolverStats {
            status: SolveStatus::MaxIters,
            iterations: 1,
            qp_iterations: 0,
            kkt_residual: 0.0,
            max_slack: 0.0,
            fallback: false,
            solve_time_s: 0.0,
        };
        SimTrace {
            config: ScenarioConfig::default(),
            agent_ids: vec![0, 1],
            obstacles: vec![ObstacleRecord { id: 0, center: [0.0; 3], radius: 0.15 }],
            steps: distances
                .iter()
                .enumerate()
                .map(|(k, (dq, dob))| StepRecord {
                    step: k,
                    t: k as f64 * 0.1,
                    leg: 0,
                    states: vec![[0.0; 13]; 2],
                    commands: vec![[0.0; 4]; 2],
                    neighbors: vec![vec![], vec![]],
                    solver: vec![stats; 2],
                    agent_distances: vec![*dq],
                    obstacle_distances: vec![*dob, 5.0],
                })
                .collect(),
            final_states: vec![],
            final_time: 0.0,
            completed: true,
        }
    }

    #[test]
    fn reentering_a_violation_counts_once() {
        let trace = trace_with(&[(1.0, 1.0), (0.79, 1.0), (0.9, 1.0), (0.7, 1.0), (1.2, 1.0)]);
        let r = ViolationReport::from_trace(&trace);
        assert_eq!(r.total_count, 1);
        let e = r.agent_agent_events[0];
        assert_eq!(e.onset_step, 1);
        assert!((e.min_distance - 0.7).abs() < 1e-12);
    }

    #[test]
    fn touching_the_safety_distance_is_not_a_violation() {
        let trace = trace_with(&[(0.8, 0.55), (0.8, 0.55)]);
        let r = ViolationReport::from_trace(&trace);
        assert_eq!(r.total_count, 0);
        assert!((r.min_obstacle_clearance).abs() < 1e-12);
    }

    #[test]
    fn obstacle_events_use_the_obstacle_radius() {
        let trace = trace_with(&[(2.0, 0.54)]);
        let r = ViolationReport::from_trace(&trace);
        assert_eq!(r.agent_obstacle_events.len(), 1);
        assert_eq!((r.agent_obstacle_events[0].i, r.agent_obstacle_events[0].j), (0, 0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("schema_version,kind"));
    }
}
