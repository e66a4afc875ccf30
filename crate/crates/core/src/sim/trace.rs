//! Simulation traces and their on-disk formats.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nmpc::{NeighborKind, SolveStatus};

use super::config::ScenarioConfig;
use super::world::World;

/// Version of the NDJSON trace records.
pub const TRACE_SCHEMA_VERSION: u32 = 1;
/// Version of the per-step distance CSV.
pub const DISTANCE_CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborRef {
    pub kind: NeighborKind,
    pub id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub status: SolveStatus,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    /// Largest barrier slack over the horizon.
    pub max_slack: f64,
    /// The previous command was held because the solve failed.
    pub fallback: bool,
    /// Wall time; excluded from the trace fingerprint.
    pub solve_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleRecord {
    pub id: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

/// One control step. States are taken at the start of the step; the
/// distances are minima over the step's plant substeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub leg: u32,
    pub states: Vec<[f64; 13]>,
    pub commands: Vec<[f64; 4]>,
    pub neighbors: Vec<Vec<NeighborRef>>,
    pub solver: Vec<SolverStats>,
    /// Upper triangle over agent pairs, row-major.
    pub agent_distances: Vec<f64>,
    /// Agent-major, one entry per (agent, obstacle).
    pub obstacle_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub config: ScenarioConfig,
    pub agent_ids: Vec<usize>,
    pub obstacles: Vec<ObstacleRecord>,
    pub steps: Vec<StepRecord>,
    pub final_states: Vec<[f64; 13]>,
    pub final_time: f64,
    pub completed: bool,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum NdjsonLine<'a> {
    Header {
        schema_version: u32,
        config: &'a ScenarioConfig,
        agent_ids: &'a [usize],
        obstacles: &'a [ObstacleRecord],
    },
    Step(&'a StepRecord),
    Footer {
        final_time: f64,
        completed: bool,
        final_states: &'a [[f64; 13]],
        fingerprint: String,
    },
}

impl SimTrace {
    pub fn new(config: ScenarioConfig, world: &World) -> Self {
        Self {
            config,
            agent_ids: world.agents.iter().map(|a| a.id).collect(),
            obstacles: world
                .obstacles
                .iter()
                .map(|o| ObstacleRecord { id: o.id, center: o.center.into(), radius: o.radius })
                .collect(),
            steps: Vec::new(),
            final_states: Vec::new(),
            final_time: 0.0,
            completed: false,
        }
    }

    pub fn push(&mut self, record: StepRecord) {
        self.steps.push(record);
    }

    pub fn finish(&mut self, world: &World, completed: bool) {
        self.final_states = world.agents.iter().map(|a| a.state.to_vector().into()).collect();
        self.final_time = world.t;
        self.completed = completed;
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    /// SHA-256 over every recorded quantity except solver wall times.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let f = |h: &mut Sha256, x: f64| h.update(x.to_bits().to_le_bytes());
        let u = |h: &mut Sha256, x: u64| h.update(x.to_le_bytes());
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for id in &self.agent_ids {
            u(&mut h, *id as u64);
        }
        for o in &self.obstacles {
            u(&mut h, o.id as u64);
            o.center.iter().for_each(|c| f(&mut h, *c));
            f(&mut h, o.radius);
        }
        for s in &self.steps {
            u(&mut h, s.step as u64);
            f(&mut h, s.t);
            u(&mut h, s.leg as u64);
            s.states.iter().flatten().for_each(|c| f(&mut h, *c));
            s.commands.iter().flatten().for_each(|c| f(&mut h, *c));
            for list in &s.neighbors {
                u(&mut h, list.len() as u64);
                for n in list {
                    u(&mut h, n.kind as u64);
                    u(&mut h, n.id as u64);
                }
            }
            for st in &s.solver {
                u(&mut h, st.status as u64);
                u(&mut h, st.iterations as u64);
                u(&mut h, st.qp_iterations as u64);
                f(&mut h, st.kkt_residual);
                f(&mut h, st.max_slack);
                u(&mut h, st.fallback as u64);
            }
            s.agent_distances.iter().for_each(|c| f(&mut h, *c));
            s.obstacle_distances.iter().for_each(|c| f(&mut h, *c));
        }
        self.final_states.iter().flatten().for_each(|c| f(&mut h, *c));
        f(&mut h, self.final_time);
        u(&mut h, self.completed as u64);
        hex::encode(h.finalize())
    }

    /// Header line, one line per step, then a footer with the fingerprint.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut line = |rec: &NdjsonLine<'_>| -> io::Result<()> {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")
        };
        line(&NdjsonLine::Header {
            schema_version: TRACE_SCHEMA_VERSION,
            config: &self.config,
            agent_ids: &self.agent_ids,
            obstacles: &self.obstacles,
        })?;
        for s in &self.steps {
            line(&NdjsonLine::Step(s))?;
        }
        line(&NdjsonLine::Footer {
            final_time: self.final_time,
            completed: self.completed,
            final_states: &self.final_states,
            fingerprint: self.fingerprint(),
        })
    }

    pub fn distance_columns(&self) -> Vec<String> {
        let n = self.n_agents();
        let mut cols = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                cols.push(format!("q{}-q{}", self.agent_ids[i], self.agent_ids[j]));
            }
        }
        for i in 0..n {
            for o in &self.obstacles {
                cols.push(format!("q{}-o{}", self.agent_ids[i], o.id));
            }
        }
        cols
    }

    /// Wide CSV: one row per step with every pair's interval-minimum distance.
    pub fn write_distance_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["schema_version".to_string(), "step".into(), "t".into()];
        header.extend(self.distance_columns());
        out.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![DISTANCE_CSV_SCHEMA_VERSION.to_string(), s.step.to_string(), format!("{:.3}", s.t)];
            row.extend(s.agent_distances.iter().chain(&s.obstacle_distances).map(|d| format!("{d:.6}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}
