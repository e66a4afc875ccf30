//! Closed-loop multi-agent simulation.

pub mod campaign;
pub mod config;
pub mod trace;
pub mod violations;
pub mod world;

pub use campaign::{apply_regime, nonconservative_ranges, regime_ranges, sweep_campaign, Regime, SweepCell, SweepRow};
pub use config::{ConfigError, EnvBounds, Layout, ObstacleSpec, ScenarioConfig};
pub use trace::{SimTrace, SolverStats, StepRecord};
pub use violations::{PairKind, ViolationEvent, ViolationReport};
pub use world::{detect_neighbors, generate_scenario, run_scenario, run_world, step_world, Agent, GenerationError, Obstacle, RunOutcome, SimError, World};
