//! World state, scenario generation and the decentralized control loop.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{step_rk4, MotorCommand, QuadParams, QuadState};
use crate::nmpc::{transcribe, MinJerkSegment, NeighborSnapshot, NmpcController, SolveStatus};

use super::config::{ConfigError, Layout, ScenarioConfig};
use super::trace::{NeighborRef, SimTrace, SolverStats, StepRecord};
use super::violations::ViolationReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("could not place {what} after {attempts} attempts; the world is too crowded")]
    Exhausted { what: String, attempts: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("agent {agent} diverged at t = {t:.3} s")]
    Diverged { agent: usize, t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub id: usize,
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub state: QuadState,
    /// Endpoints of the back-and-forth route.
    pub home: Vector3<f64>,
    pub away: Vector3<f64>,
    pub segment: MinJerkSegment,
    pub last_command: MotorCommand,
    controller: NmpcController,
}

impl Agent {
    pub fn new(id: usize, state: QuadState, home: Vector3<f64>, away: Vector3<f64>, segment: MinJerkSegment, params: &QuadParams) -> Self {
        Self { id, state, home, away, segment, last_command: MotorCommand::hover(params), controller: NmpcController::new() }
    }

    pub fn target(&self) -> Vector3<f64> {
        self.segment.goal
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub t: f64,
    pub step: usize,
    /// Index of the current leg; even legs go home to away.
    pub leg: u32,
    pub agents: Vec<Agent>,
    pub obstacles: Vec<Obstacle>,
}

impl World {
    pub fn states(&self) -> Vec<QuadState> {
        self.agents.iter().map(|a| a.state).collect()
    }
}

fn segment_for(cfg: &ScenarioConfig, from: Vector3<f64>, to: Vector3<f64>, t0: f64) -> MinJerkSegment {
    MinJerkSegment::new(from, to, cfg.params.v_max.max(1e-9), Some(cfg.params.a_max)).starting_at(t0)
}

fn sample_point(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vector3<f64> {
    let [x, y, z] = cfg.env_bounds.axes();
    Vector3::new(rng.gen_range(x[0]..=x[1]), rng.gen_range(y[0]..=y[1]), rng.gen_range(z[0]..=z[1]))
}

fn place_points(
    rng: &mut ChaCha8Rng,
    cfg: &ScenarioConfig,
    obstacles: &[Obstacle],
    what: &str,
) -> Result<Vec<Vector3<f64>>, GenerationError> {
    let d_agents = cfg.agent_safety_distance();
    let mut placed: Vec<Vector3<f64>> = Vec::with_capacity(cfg.n_agents);
    for i in 0..cfg.n_agents {
        let mut attempts = 0;
        loop {
            if attempts == cfg.max_placement_attempts {
                return Err(GenerationError::Exhausted { what: format!("{what} {i}"), attempts });
            }
            attempts += 1;
            let p = sample_point(rng, cfg);
            let clear_of_agents = placed.iter().all(|q| (p - q).norm() >= d_agents);
            let clear_of_obstacles =
                obstacles.iter().all(|o| (p - o.center).norm() >= cfg.obstacle_safety_distance(o.radius));
            if clear_of_agents && clear_of_obstacles {
                placed.push(p);
                break;
            }
        }
    }
    Ok(placed)
}

/// Builds the initial world. Random layouts are a pure function of the seed.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let (starts, goals, obstacles) = match &cfg.layout {
        Layout::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let [r_lo, r_hi] = cfg.obstacle_radius;
            let obstacles: Vec<Obstacle> = (0..cfg.n_obstacles)
                .map(|id| {
                    let center = sample_point(&mut rng, cfg);
                    Obstacle { id, center, radius: rng.gen_range(r_lo..=r_hi) }
                })
                .collect();
            let starts = place_points(&mut rng, cfg, &obstacles, "start position")?;
            let goals = place_points(&mut rng, cfg, &obstacles, "goal position")?;
            (starts, goals, obstacles)
        }
        Layout::Explicit { starts, goals, obstacles } => (
            starts.iter().map(|p| Vector3::from(*p)).collect(),
            goals.iter().map(|p| Vector3::from(*p)).collect(),
            obstacles
                .iter()
                .enumerate()
                .map(|(id, o)| Obstacle { id, center: Vector3::from(o.center), radius: o.radius })
                .collect(),
        ),
    };
    let agents = starts
        .iter()
        .zip(&goals)
        .enumerate()
        .map(|(id, (s, g))| Agent::new(id, QuadState::at_rest(*s), *s, *g, segment_for(cfg, *s, *g, 0.0), &cfg.params))
        .collect();
    Ok(World { t: 0.0, step: 0, leg: 0, agents, obstacles })
}

/// Entities within range of agent `i`, inclusive of the range itself,
/// ordered by kind and id.
pub fn detect_neighbors(
    states: &[QuadState],
    ids: &[usize],
    obstacles: &[Obstacle],
    i: usize,
    agent_range: f64,
    obstacle_range: f64,
    agent_radius: f64,
) -> Vec<NeighborSnapshot> {
    let me = &states[i];
    let mut out: Vec<NeighborSnapshot> = states
        .iter()
        .zip(ids)
        .enumerate()
        .filter(|(j, (s, _))| *j != i && (s.p - me.p).norm() <= agent_range)
        .map(|(_, (s, id))| NeighborSnapshot::agent(*id, s.p, s.v, agent_radius))
        .collect();
    out.extend(
        obstacles
            .iter()
            .filter(|o| (o.center - me.p).norm() <= obstacle_range)
            .map(|o| NeighborSnapshot::obstacle(o.id, o.center, o.radius)),
    );
    out.sort_by_key(|n| (n.kind, n.id));
    out
}

struct AgentDecision {
    command: MotorCommand,
    neighbors: Vec<NeighborRef>,
    stats: SolverStats,
}

fn decide(agent: &mut Agent, index: usize, snapshot: &[QuadState], ids: &[usize], obstacles: &[Obstacle], cfg: &ScenarioConfig, t: f64) -> AgentDecision {
    let neighbors = detect_neighbors(snapshot, ids, obstacles, index, cfg.agent_range, cfg.obstacle_range, cfg.params.radius);
    let nlp = transcribe(&snapshot[index], &agent.segment, t, &neighbors, &cfg.ocp, &cfg.gains, &cfg.margins, &cfg.params);
    let sol = agent.controller.solve(&nlp);
    let fallback = sol.status == SolveStatus::InfeasibleQp;
    let command = if fallback { agent.last_command } else { sol.applied(&cfg.params) };
    agent.last_command = command;
    AgentDecision {
        command,
        neighbors: neighbors.iter().map(|n| NeighborRef { kind: n.kind, id: n.id }).collect(),
        stats: SolverStats {
            status: sol.status,
            iterations: sol.iterations,
            qp_iterations: sol.qp_iterations,
            kkt_residual: sol.kkt_residual,
            max_slack: sol.max_ecbf_slack(),
            fallback,
            solve_time_s: sol.solve_time_s,
        },
    }
}

/// Advances the world by one control step and returns the step record.
///
/// Every agent decides from the same frozen snapshot, so the outcome does not
/// depend on the order (or concurrency) in which agents are processed.
pub fn step_world(world: &mut World, cfg: &ScenarioConfig, parallel: bool) -> Result<StepRecord, SimError> {
    let snapshot = world.states();
    let ids: Vec<usize> = world.agents.iter().map(|a| a.id).collect();
    let t = world.t;
    let obstacles = world.obstacles.clone();
    let decisions: Vec<AgentDecision> = if parallel {
        world
            .agents
            .par_iter_mut()
            .enumerate()
            .map(|(i, a)| decide(a, i, &snapshot, &ids, &obstacles, cfg, t))
            .collect()
    } else {
        world.agents.iter_mut().enumerate().map(|(i, a)| decide(a, i, &snapshot, &ids, &obstacles, cfg, t)).collect()
    };

    // Integrate the plant in lockstep to record per-pair interval minima.
    let n = world.agents.len();
    let h = cfg.control_dt / cfg.plant_substeps as f64;
    let mut states = snapshot.clone();
    let mut agent_distances = pair_distances(&states);
    let mut obstacle_distances = obstacle_distances_of(&states, &world.obstacles);
    for _ in 0..cfg.plant_substeps {
        for (i, s) in states.iter_mut().enumerate() {
            *s = step_rk4(s, &decisions[i].command, &cfg.params, h).map_err(|_| SimError::Diverged { agent: ids[i], t })?;
        }
        for (d, nd) in agent_distances.iter_mut().zip(pair_distances(&states)) {
            *d = d.min(nd);
        }
        for (d, nd) in obstacle_distances.iter_mut().zip(obstacle_distances_of(&states, &world.obstacles)) {
            *d = d.min(nd);
        }
    }
    for (i, a) in world.agents.iter_mut().enumerate() {
        if !states[i].is_finite() {
            return Err(SimError::Diverged { agent: a.id, t });
        }
        a.state = states[i];
    }
    debug_assert_eq!(decisions.len(), n);

    let record = StepRecord {
        step: world.step,
        t,
        leg: world.leg,
        states: snapshot.iter().map(|s| s.to_vector().into()).collect(),
        commands: decisions.iter().map(|d| d.command.u.into()).collect(),
        neighbors: decisions.iter().map(|d| d.neighbors.clone()).collect(),
        solver: decisions.iter().map(|d| d.stats).collect(),
        agent_distances,
        obstacle_distances,
    };
    world.step += 1;
    world.t = world.step as f64 * cfg.control_dt;
    Ok(record)
}

/// Upper-triangle center distances, row-major.
pub fn pair_distances(states: &[QuadState]) -> Vec<f64> {
    let n = states.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((states[i].p - states[j].p).norm());
        }
    }
    out
}

/// Agent-major agent-to-obstacle center distances.
pub fn obstacle_distances_of(states: &[QuadState], obstacles: &[Obstacle]) -> Vec<f64> {
    states.iter().flat_map(|s| obstacles.iter().map(move |o| (s.p - o.center).norm())).collect()
}

fn captured(agent: &Agent, cfg: &ScenarioConfig) -> bool {
    (agent.state.p - agent.target()).norm() <= cfg.goal_tolerance && agent.state.v.norm() < cfg.capture_speed
}

fn total_legs(cfg: &ScenarioConfig) -> u32 {
    (2 * cfg.back_and_forth_cycles).max(1)
}

/// Swaps every agent onto its next leg once all agents have arrived.
/// Returns true when the final leg has been completed.
fn advance_legs(world: &mut World, cfg: &ScenarioConfig) -> bool {
    if !world.agents.iter().all(|a| captured(a, cfg)) {
        return false;
    }
    if world.leg + 1 >= total_legs(cfg) {
        return true;
    }
    world.leg += 1;
    let t = world.t;
    for a in &mut world.agents {
        let (from, to) = if world.leg % 2 == 0 { (a.home, a.away) } else { (a.away, a.home) };
        a.segment = segment_for(cfg, from, to, t);
    }
    false
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: SimTrace,
    pub report: ViolationReport,
    /// All agents reached their final goals before the time limit.
    pub completed: bool,
}

/// Runs a world forward until every agent is captured on the final leg or
/// the time budget is spent.
pub fn run_world(mut world: World, cfg: &ScenarioConfig, parallel: bool) -> Result<RunOutcome, SimError> {
    let mut trace = SimTrace::new(cfg.clone(), &world);
    let max_steps = (cfg.sim_duration / cfg.control_dt).round() as usize;
    let mut completed = false;
    while world.step < max_steps {
        let record = step_world(&mut world, cfg, parallel)?;
        trace.push(record);
        if advance_legs(&mut world, cfg) {
            completed = true;
            break;
        }
    }
    trace.finish(&world, completed);
    let report = ViolationReport::from_trace(&trace);
    Ok(RunOutcome { trace, report, completed })
}

pub fn run_scenario(cfg: &ScenarioConfig, parallel: bool) -> Result<RunOutcome, SimError> {
    let world = generate_scenario(cfg)?;
    run_world(world, cfg, parallel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmpc::NeighborKind;
    use crate::sim::config::ObstacleSpec;

    fn swap_config() -> ScenarioConfig {
        ScenarioConfig {
            n_agents: 2,
            layout: Layout::Explicit {
                starts: vec![[-3.0, -0.2, 1.0], [3.0, 0.2, 1.0]],
                goals: vec![[3.0, -0.2, 1.0], [-3.0, 0.2, 1.0]],
                obstacles: vec![],
            },
            sim_duration: 25.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig { seed: 42, n_agents: 5, n_obstacles: 5, ..ScenarioConfig::default() };
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a.states(), b.states());
        assert_eq!(a.obstacles, b.obstacles);
        let c = generate_scenario(&ScenarioConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.states(), c.states());
    }

    #[test]
    fn dense_reference_world_is_generated_with_clearances() {
        let cfg = ScenarioConfig { seed: 3, n_agents: 10, n_obstacles: 20, ..ScenarioConfig::default() };
        let w = generate_scenario(&cfg).unwrap();
        assert_eq!(w.obstacles.len(), 20);
        for (i, a) in w.agents.iter().enumerate() {
            for b in &w.agents[i + 1..] {
                assert!((a.home - b.home).norm() >= 0.8);
                assert!((a.away - b.away).norm() >= 0.8);
            }
            for o in &w.obstacles {
                assert!((0.1..=1.0).contains(&o.radius));
                assert!((a.home - o.center).norm() >= 0.4 + o.radius);
                assert!((a.away - o.center).norm() >= 0.4 + o.radius);
            }
        }
    }

    #[test]
    fn no_obstacles_means_empty_list() {
        let w = generate_scenario(&ScenarioConfig { n_obstacles: 0, n_agents: 3, ..ScenarioConfig::default() }).unwrap();
        assert!(w.obstacles.is_empty());
    }

    #[test]
    fn overcrowding_reports_generation_failure() {
        let cfg = ScenarioConfig {
            n_agents: 50,
            env_bounds: crate::sim::config::EnvBounds { x: [0.0, 1.0], y: [0.0, 1.0], z: [1.0, 1.0] },
            max_placement_attempts: 100,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate_scenario(&cfg), Err(SimError::Generation(_))));
    }

    #[test]
    fn detection_is_inclusive_and_excludes_self() {
        let states = vec![
            QuadState::at_rest(Vector3::zeros()),
            QuadState::at_rest(Vector3::new(2.0, 0.0, 0.0)),
            QuadState::at_rest(Vector3::new(0.0, 2.5, 0.0)),
        ];
        let ids = [0, 1, 2];
        let obstacles = [Obstacle { id: 0, center: Vector3::new(0.0, 0.0, 1.5), radius: 0.3 }];
        let found = detect_neighbors(&states, &ids, &obstacles, 0, 2.0, 1.5, 0.2);
        assert_eq!(found.len(), 2);
        assert_eq!((found[0].kind, found[0].id), (NeighborKind::Agent, 1));
        assert_eq!(found[1].kind, NeighborKind::Obstacle);
        let all = detect_neighbors(&states, &ids, &obstacles, 0, f64::INFINITY, f64::INFINITY, 0.2);
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|n| !(n.kind == NeighborKind::Agent && n.id == 0)));
    }

    #[test]
    fn single_agent_reaches_its_goal() {
        let cfg = ScenarioConfig {
            n_agents: 1,
            layout: Layout::Explicit { starts: vec![[0.0, 0.0, 1.0]], goals: vec![[4.0, 2.0, 1.5]], obstacles: vec![] },
            sim_duration: 20.0,
            ..ScenarioConfig::default()
        };
        let out = run_scenario(&cfg, false).unwrap();
        assert!(out.completed);
        let last = out.trace.final_states[0];
        assert!((Vector3::new(last[0], last[1], last[2]) - Vector3::new(4.0, 2.0, 1.5)).norm() < 0.05);
    }

    #[test]
    fn offset_swap_is_safe_with_unlimited_range() {
        let out = run_scenario(&swap_config(), false).unwrap();
        assert_eq!(out.report.total_count, 0, "min distance {}", out.report.min_agent_distance);
        assert!(out.report.min_agent_distance >= 0.8);
        assert!(out.completed);
    }

    #[test]
    fn agent_order_does_not_matter() {
        let cfg = ScenarioConfig { seed: 11, n_agents: 4, n_obstacles: 3, ..ScenarioConfig::default() };
        let mut a = generate_scenario(&cfg).unwrap();
        let mut b = a.clone();
        b.agents.reverse();
        for _ in 0..5 {
            step_world(&mut a, &cfg, false).unwrap();
            step_world(&mut b, &cfg, true).unwrap();
        }
        for agent in &a.agents {
            let other = b.agents.iter().find(|x| x.id == agent.id).unwrap();
            assert_eq!(agent.state, other.state);
        }
    }

    #[test]
    fn out_of_range_entities_do_not_change_commands() {
        let mut cfg = ScenarioConfig {
            n_agents: 2,
            n_obstacles: 1,
            agent_range: 3.0,
            obstacle_range: 2.0,
            layout: Layout::Explicit {
                starts: vec![[0.0, 0.0, 1.0], [10.0, 0.0, 1.0]],
                goals: vec![[2.0, 0.0, 1.0], [10.0, 3.0, 1.0]],
                obstacles: vec![ObstacleSpec { center: [0.0, 6.0, 1.0], radius: 0.5 }],
            },
            ..ScenarioConfig::default()
        };
        let mut w1 = generate_scenario(&cfg).unwrap();
        let r1 = step_world(&mut w1, &cfg, false).unwrap();
        if let Layout::Explicit { starts, obstacles, .. } = &mut cfg.layout {
            starts[1] = [9.0, -2.0, 1.5];
            obstacles[0].center = [-1.0, 7.0, 0.8];
        }
        let mut w2 = generate_scenario(&cfg).unwrap();
        let r2 = step_world(&mut w2, &cfg, false).unwrap();
        assert_eq!(r1.commands[0], r2.commands[0]);
        assert_eq!(w1.agents[0].state, w2.agents[0].state);
    }

    #[test]
    fn back_and_forth_toggles_goals() {
        let cfg = ScenarioConfig {
            n_agents: 1,
            back_and_forth_cycles: 1,
            layout: Layout::Explicit { starts: vec![[0.0, 0.0, 1.0]], goals: vec![[1.5, 0.0, 1.0]], obstacles: vec![] },
            sim_duration: 30.0,
            ..ScenarioConfig::default()
        };
        let out = run_scenario(&cfg, false).unwrap();
        assert!(out.completed);
        assert_eq!(out.trace.steps.last().unwrap().leg, 1);
        let last = out.trace.final_states[0];
        assert!((Vector3::new(last[0], last[1], last[2]) - Vector3::new(0.0, 0.0, 1.0)).norm() <= 0.1);
    }
}
