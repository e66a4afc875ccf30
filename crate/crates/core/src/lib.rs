//! Decentralized NMPC with exponential control barrier functions for
//! quadrotor swarms, together with detection-range bounds and a closed-loop
//! simulator.

pub mod bounds;
pub mod dynamics;
pub mod ecbf;
pub mod nmpc;
pub mod sim;

pub use bounds::{
    conservative_bound, discretize_bound, min_range_oracle, nonconservative_bound, OracleResult, RangeBoundInputs, RangeBoundResult,
    SwapScenario,
};
pub use dynamics::{MotorCommand, QuadParams, QuadState};
pub use ecbf::{EcbfGains, RelativeState, SafetyGeometry};
pub use nmpc::{NeighborSnapshot, OcpConfig, OcpSolution, SafetyMargins};
pub use sim::{run_scenario, Regime, ScenarioConfig, SimTrace, ViolationReport};
