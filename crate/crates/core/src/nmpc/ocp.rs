//! Optimal control problem definition and multiple-shooting transcription.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    linear_acceleration, thrust_axis, thrust_axis_jacobian, InputVector, QuadParams, QuadState, StateVector, POS, QUAT, STATE_DIM, VEL,
};
use crate::ecbf::{linearize_constraint, EcbfGains, RelativeState, SafetyGeometry};

use super::reference::RefPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid OCP configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// One Gauss-Newton step per control step, warm started by shifting.
    Rti,
    /// Iterate with a backtracking line search until converged.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Diagonal of the state weight, in state-vector order.
    pub state_weights: [f64; STATE_DIM],
    /// Diagonal of the input weight, one entry per rotor.
    pub input_weights: [f64; 4],
    /// Linear (L1) penalty on each slack variable.
    pub slack_penalty: f64,
    /// Small quadratic term on the slacks that keeps the QP Hessian definite.
    pub slack_quadratic: f64,
    pub mode: SolveMode,
    /// Levenberg-Marquardt damping on the input step. It vanishes at a
    /// converged point, so it shapes the iterates without moving the optimum.
    pub step_damping: f64,
    /// Backtrack the single RTI step on a merit function evaluated on
    /// re-simulated rollouts. Without it the iteration takes the full
    /// Gauss-Newton step, which can diverge once barrier rows are active.
    pub rti_line_search: bool,
    pub max_sqp_iters: usize,
    pub kkt_tol: f64,
    /// Freeze the relative speed at its stage-0 value (ablation).
    pub frozen_vrel: bool,
    /// Impose the barrier constraint at every shooting node, not just the first.
    pub ecbf_all_stages: bool,
    pub speed_cap: bool,
    /// Keep the translational acceleration inside `a_max`.
    pub accel_limit: bool,
}

impl Default for OcpConfig {
    fn default() -> Self {
        let mut state_weights = [0.0; STATE_DIM];
        for (i, w) in state_weights.iter_mut().enumerate() {
            *w = match i {
                0..=2 => 10.0,
                3..=5 => 1.0,
                6..=9 => 1.0,
                _ => 0.1,
            };
        }
        Self {
            horizon: 1.0,
            dt: 0.1,
            state_weights,
            input_weights: [0.1; 4],
            slack_penalty: 1e4,
            slack_quadratic: 1.0,
            mode: SolveMode::Rti,
            step_damping: 1.0,
            rti_line_search: true,
            max_sqp_iters: 50,
            kkt_tol: 1e-6,
            frozen_vrel: false,
            ecbf_all_stages: true,
            speed_cap: true,
            accel_limit: true,
        }
    }
}

impl OcpConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return bad("horizon and dt must be positive");
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-9 || steps.round() < 1.0 {
            return bad("horizon must be a whole number of shooting intervals");
        }
        if self.state_weights.iter().chain(self.input_weights.iter()).any(|w| !(*w >= 0.0)) {
            return bad("weights must be nonnegative");
        }
        if self.input_weights.iter().any(|w| *w <= 0.0) {
            return bad("input weights must be strictly positive");
        }
        let biggest = self.state_weights.iter().chain(self.input_weights.iter()).fold(0.0_f64, |a, b| a.max(*b));
        if !(self.slack_penalty > biggest) || !(self.slack_quadratic > 0.0) {
            return bad("slack penalty must dominate the tracking weights");
        }
        if !(self.step_damping >= 0.0) {
            return bad("step damping must be nonnegative");
        }
        if self.max_sqp_iters == 0 || !(self.kkt_tol > 0.0) {
            return bad("max_sqp_iters and kkt_tol must be positive");
        }
        Ok(())
    }
}

/// Margins added to the radii of a pair when forming the safety distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyMargins {
    pub d_s: f64,
    pub d_so: f64,
}

impl Default for SafetyMargins {
    fn default() -> Self {
        Self { d_s: 0.4, d_so: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborKind {
    Agent,
    Obstacle,
}

/// What the ego agent knows about one detected entity at solve time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborSnapshot {
    pub id: usize,
    pub kind: NeighborKind,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub radius: f64,
}

impl NeighborSnapshot {
    pub fn agent(id: usize, p: Vector3<f64>, v: Vector3<f64>, radius: f64) -> Self {
        Self { id, kind: NeighborKind::Agent, p, v, radius }
    }

    pub fn obstacle(id: usize, p: Vector3<f64>, radius: f64) -> Self {
        Self { id, kind: NeighborKind::Obstacle, p, v: Vector3::zeros(), radius }
    }

    /// Constant-velocity extrapolation.
    pub fn predicted_position(&self, t: f64) -> Vector3<f64> {
        self.p + self.v * t
    }

    pub fn geometry(&self, margins: &SafetyMargins, ego_radius: f64) -> SafetyGeometry {
        let margin = match self.kind {
            NeighborKind::Agent => margins.d_s,
            NeighborKind::Obstacle => margins.d_so,
        };
        SafetyGeometry::new(margin, ego_radius, self.radius)
    }
}

/// Anything that yields a position reference over time.
pub trait TrajectoryReference {
    fn sample(&self, t: f64) -> RefPoint;
}

impl TrajectoryReference for super::reference::MinJerkSegment {
    fn sample(&self, t: f64) -> RefPoint {
        super::reference::MinJerkSegment::sample(self, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpNeighbor {
    pub snapshot: NeighborSnapshot,
    pub geom: SafetyGeometry,
}

/// A transcribed problem: stage references, neighbor data and the settings
/// needed to evaluate costs and constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Nlp {
    pub x0: StateVector,
    /// `N + 1` state references.
    pub x_ref: Vec<StateVector>,
    pub u_ref: InputVector,
    pub neighbors: Vec<NlpNeighbor>,
    pub cfg: OcpConfig,
    pub gains: EcbfGains,
    pub params: QuadParams,
    /// Relative speeds at the initial state, used when `frozen_vrel` is set.
    frozen_speeds: Vec<f64>,
}

/// Gradient of a scalar stage constraint with respect to `(x_k, u_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRow {
    pub value: f64,
    pub d_x: SVector<f64, STATE_DIM>,
    pub d_u: InputVector,
}

#[allow(clippy::too_many_arguments)]
pub fn transcribe(
    x0: &QuadState,
    reference: &dyn TrajectoryReference,
    t_now: f64,
    neighbors: &[NeighborSnapshot],
    cfg: &OcpConfig,
    gains: &EcbfGains,
    margins: &SafetyMargins,
    params: &QuadParams,
) -> Nlp {
    let n = cfg.n_steps();
    let x_ref = (0..=n)
        .map(|k| {
            let r = reference.sample(t_now + k as f64 * cfg.dt);
            QuadState { p: r.p, v: r.v, q: nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0), w: Vector3::zeros() }.to_vector()
        })
        .collect();
    let neighbors: Vec<NlpNeighbor> = neighbors
        .iter()
        .map(|s| NlpNeighbor { snapshot: *s, geom: s.geometry(margins, params.radius) })
        .collect();
    let frozen_speeds = neighbors.iter().map(|nb| (nb.snapshot.v - x0.v).norm()).collect();
    Nlp {
        x0: x0.to_vector(),
        x_ref,
        u_ref: InputVector::repeat(params.hover_thrust()),
        neighbors,
        cfg: cfg.clone(),
        gains: *gains,
        params: *params,
        frozen_speeds,
    }
}

impl Nlp {
    pub fn n_steps(&self) -> usize {
        self.x_ref.len() - 1
    }

    pub fn n_inputs(&self) -> usize {
        4 * self.n_steps()
    }

    /// Stages at which the barrier constraint is imposed.
    pub fn ecbf_stages(&self) -> usize {
        if self.cfg.ecbf_all_stages {
            self.n_steps()
        } else {
            1
        }
    }

    pub fn n_box_rows(&self) -> usize {
        2 * self.n_inputs()
    }

    pub fn n_ecbf_rows(&self) -> usize {
        self.ecbf_stages() * self.neighbors.len()
    }

    /// Nonnegativity rows of the barrier slacks (one slack per barrier row).
    pub fn n_ecbf_slack_rows(&self) -> usize {
        self.n_ecbf_rows()
    }

    /// Speed-cap rows and acceleration-limit rows.
    pub fn n_envelope_rows(&self) -> usize {
        let n = self.n_steps();
        (self.cfg.speed_cap as usize) * n + (self.cfg.accel_limit as usize) * n
    }

    /// One shared envelope slack per stage, if any envelope rows exist.
    pub fn n_envelope_slacks(&self) -> usize {
        if self.n_envelope_rows() > 0 {
            self.n_steps()
        } else {
            0
        }
    }

    pub fn n_inequality_rows(&self) -> usize {
        self.n_box_rows() + self.n_ecbf_rows() + self.n_ecbf_slack_rows() + self.n_envelope_rows() + self.n_envelope_slacks()
    }

    pub fn n_decision(&self) -> usize {
        self.n_inputs() + self.n_ecbf_rows() + self.n_envelope_slacks()
    }

    /// Least-squares tracking cost of a trajectory.
    pub fn tracking_cost(&self, xs: &[StateVector], us: &[InputVector]) -> f64 {
        let qw = &self.cfg.state_weights;
        let rw = &self.cfg.input_weights;
        let mut cost = 0.0;
        for k in 1..=self.n_steps() {
            let e = xs[k] - self.x_ref[k];
            cost += e.iter().zip(qw.iter()).map(|(e, w)| w * e * e).sum::<f64>();
        }
        for u in us {
            let e = u - self.u_ref;
            cost += e.iter().zip(rw.iter()).map(|(e, w)| w * e * e).sum::<f64>();
        }
        cost
    }

    /// Barrier constraint `G` of neighbor `j` at stage `k` and its gradient.
    pub fn ecbf_row(&self, k: usize, j: usize, x: &StateVector, u: &InputVector) -> StageRow {
        let nb = &self.neighbors[j];
        let t = k as f64 * self.cfg.dt;
        let p_i = x.fixed_rows::<3>(POS).into_owned();
        let v_i = x.fixed_rows::<3>(VEL).into_owned();
        let q = x.fixed_rows::<4>(QUAT).into_owned();
        let rel = RelativeState::between(&p_i, &v_i, &nb.snapshot.predicted_position(t), &nb.snapshot.v);
        let accel = linear_acceleration(&q, u, &self.params);
        let frozen = self.cfg.frozen_vrel.then(|| self.frozen_speeds[j]);
        let lin = linearize_constraint(&rel, &nb.geom, &self.gains, &accel, frozen);

        let thrust = u.sum() / self.params.mass;
        let mut d_x = SVector::<f64, STATE_DIM>::zeros();
        d_x.fixed_rows_mut::<3>(POS).copy_from(&(-lin.d_p_rel));
        d_x.fixed_rows_mut::<3>(VEL).copy_from(&(-lin.d_v_rel));
        d_x.fixed_rows_mut::<4>(QUAT).copy_from(&(thrust_axis_jacobian(&q).transpose() * lin.d_accel * thrust));
        let d_u = InputVector::repeat(thrust_axis(&q).dot(&lin.d_accel) / self.params.mass);
        StageRow { value: lin.value, d_x, d_u }
    }

    /// `a_max^2 - |a(x, u)|^2`, nonnegative when the acceleration is admissible.
    pub fn accel_row(&self, x: &StateVector, u: &InputVector) -> StageRow {
        let q = x.fixed_rows::<4>(QUAT).into_owned();
        let accel = linear_acceleration(&q, u, &self.params);
        let thrust = u.sum() / self.params.mass;
        let mut d_x = SVector::<f64, STATE_DIM>::zeros();
        d_x.fixed_rows_mut::<4>(QUAT).copy_from(&(thrust_axis_jacobian(&q).transpose() * accel * (-2.0 * thrust)));
        let d_u = InputVector::repeat(-2.0 * thrust_axis(&q).dot(&accel) / self.params.mass);
        StageRow { value: self.params.a_max.powi(2) - accel.norm_squared(), d_x, d_u }
    }

    /// `v_max^2 - |v|^2`.
    pub fn speed_row(&self, x: &StateVector) -> StageRow {
        let v = x.fixed_rows::<3>(VEL).into_owned();
        let mut d_x = SVector::<f64, STATE_DIM>::zeros();
        d_x.fixed_rows_mut::<3>(VEL).copy_from(&(-2.0 * v));
        StageRow { value: self.params.v_max.powi(2) - v.norm_squared(), d_x, d_u: InputVector::zeros() }
    }
}
