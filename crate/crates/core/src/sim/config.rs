//! Scenario configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::QuadParams;
use crate::ecbf::EcbfGains;
use crate::nmpc::{OcpConfig, SafetyMargins};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Axis-aligned box `[lo, hi]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvBounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Default for EnvBounds {
    fn default() -> Self {
        Self { x: [-8.0, 8.0], y: [-8.0, 8.0], z: [0.5, 2.0] }
    }
}

impl EnvBounds {
    pub fn axes(&self) -> [[f64; 2]; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_valid(&self) -> bool {
        self.axes().iter().all(|[lo, hi]| lo.is_finite() && hi.is_finite() && lo <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

/// How initial positions, goals and obstacles are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layout {
    /// Uniform sampling in the environment box with rejection.
    #[default]
    Random,
    Explicit {
        starts: Vec<[f64; 3]>,
        goals: Vec<[f64; 3]>,
        #[serde(default)]
        obstacles: Vec<ObstacleSpec>,
    },
}

/// Serializes detection ranges, writing unlimited ranges as `"inf"`.
pub mod range_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Int(v) => Ok(v as f64),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "unlimited" => Ok(f64::INFINITY),
                other => other.parse().map_err(|_| de::Error::custom(format!("invalid detection range {t:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_agents: usize,
    pub n_obstacles: usize,
    pub env_bounds: EnvBounds,
    /// Obstacle radii are drawn uniformly from this interval.
    pub obstacle_radius: [f64; 2],
    /// Agent-agent detection range.
    #[serde(with = "range_serde")]
    pub agent_range: f64,
    /// Agent-obstacle detection range.
    #[serde(with = "range_serde")]
    pub obstacle_range: f64,
    pub margins: SafetyMargins,
    pub gains: EcbfGains,
    pub params: QuadParams,
    pub ocp: OcpConfig,
    pub sim_duration: f64,
    pub control_dt: f64,
    /// Plant integration steps per control step.
    pub plant_substeps: usize,
    pub goal_tolerance: f64,
    pub capture_speed: f64,
    /// Round trips between start and goal; zero for a single leg.
    pub back_and_forth_cycles: u32,
    pub max_placement_attempts: usize,
    pub layout: Layout,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_agents: 2,
            n_obstacles: 0,
            env_bounds: EnvBounds::default(),
            obstacle_radius: [0.1, 1.0],
            agent_range: f64::INFINITY,
            obstacle_range: f64::INFINITY,
            margins: SafetyMargins::default(),
            gains: EcbfGains::reference(),
            params: QuadParams::default(),
            ocp: OcpConfig::default(),
            sim_duration: 60.0,
            control_dt: 0.1,
            plant_substeps: 10,
            goal_tolerance: 0.1,
            capture_speed: 0.1,
            back_and_forth_cycles: 0,
            max_placement_attempts: 10_000,
            layout: Layout::Random,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.env_bounds.is_valid() {
            return bad("environment bounds must be finite with lo <= hi".into());
        }
        let [r_lo, r_hi] = self.obstacle_radius;
        if !(r_lo > 0.0 && r_lo <= r_hi && r_hi.is_finite()) {
            return bad("obstacle radius interval must satisfy 0 < lo <= hi".into());
        }
        if !(self.agent_range > 0.0 && self.obstacle_range > 0.0) {
            return bad("detection ranges must be positive".into());
        }
        if !(self.margins.d_s >= 0.0 && self.margins.d_so >= 0.0) {
            return bad("safety margins must be nonnegative".into());
        }
        if !(self.control_dt > 0.0 && self.sim_duration > 0.0) || self.plant_substeps == 0 {
            return bad("control_dt, sim_duration and plant_substeps must be positive".into());
        }
        if !(self.goal_tolerance > 0.0 && self.capture_speed > 0.0) {
            return bad("capture thresholds must be positive".into());
        }
        self.params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ocp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match &self.layout {
            Layout::Random => {
                if self.n_agents == 0 {
                    return bad("at least one agent is required".into());
                }
            }
            Layout::Explicit { starts, goals, obstacles } => {
                if starts.is_empty() || starts.len() != goals.len() {
                    return bad("explicit layout needs one goal per start and at least one agent".into());
                }
                if starts.len() != self.n_agents || obstacles.len() != self.n_obstacles {
                    return bad(format!(
                        "explicit layout has {} agents and {} obstacles but n_agents = {}, n_obstacles = {}",
                        starts.len(),
                        obstacles.len(),
                        self.n_agents,
                        self.n_obstacles
                    ));
                }
                if obstacles.iter().any(|o| !(o.radius > 0.0)) {
                    return bad("obstacle radii must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn agent_safety_distance(&self) -> f64 {
        self.margins.d_s + 2.0 * self.params.radius
    }

    pub fn obstacle_safety_distance(&self, r_o: f64) -> f64 {
        self.margins.d_so + self.params.radius + r_o
    }
}
