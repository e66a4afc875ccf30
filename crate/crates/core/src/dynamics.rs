//! Quadrotor rigid-body model.
//!
//! State layout used by the flat vector forms (`StateVector`):
//!
//! ```text
//!   [ p (3) | v (3) | q = (w, x, y, z) (4) | omega (3) ]
//! ```
//!
//! Position and velocity live in the inertial frame (z up), the quaternion
//! rotates body to inertial, and the angular rate is expressed in the body
//! frame. Rotors sit on an "X" at 45 degrees from the body axes:
//!
//! ```text
//!        x
//!   1    ^    0
//!    \   |   /
//!  y <---+
//!    /       \
//!   2         3
//! ```
//!
//! Rotors 0 and 2 spin one way, 1 and 3 the other.

use nalgebra::{Matrix3, Quaternion, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputJacobian = SMatrix<f64, STATE_DIM, INPUT_DIM>;

pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const QUAT: usize = 6;
pub const RATE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {what} passed to the quadrotor model")]
    NonFinite { what: &'static str },
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
}

/// State of a single vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Body-to-inertial rotation, stored as (w, x, y, z).
    pub q: Vector4<f64>,
    pub w: Vector3<f64>,
}

impl QuadState {
    /// Level, motionless vehicle at `p`.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
            w: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(POS).copy_from(&self.p);
        x.fixed_rows_mut::<3>(VEL).copy_from(&self.v);
        x.fixed_rows_mut::<4>(QUAT).copy_from(&self.q);
        x.fixed_rows_mut::<3>(RATE).copy_from(&self.w);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            p: x.fixed_rows::<3>(POS).into_owned(),
            v: x.fixed_rows::<3>(VEL).into_owned(),
            q: x.fixed_rows::<4>(QUAT).into_owned(),
            w: x.fixed_rows::<3>(RATE).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.q.iter()).chain(self.w.iter()).all(|c| c.is_finite())
    }

    /// Attitude as a nalgebra quaternion (not renormalized).
    pub fn attitude(&self) -> Quaternion<f64> {
        Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3])
    }
}

/// Per-rotor thrusts in newtons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand {
    pub u: Vector4<f64>,
}

impl MotorCommand {
    pub fn new(u: [f64; 4]) -> Self {
        Self { u: Vector4::from(u) }
    }

    pub fn uniform(thrust: f64) -> Self {
        Self { u: Vector4::repeat(thrust) }
    }

    pub fn hover(params: &QuadParams) -> Self {
        Self::uniform(params.hover_thrust())
    }

    pub fn total(&self) -> f64 {
        self.u.sum()
    }

    pub fn within_limits(&self, params: &QuadParams) -> bool {
        self.u.iter().all(|&t| t >= params.u_min && t <= params.u_max)
    }

    pub fn clamped(&self, params: &QuadParams) -> Self {
        Self { u: self.u.map(|t| t.clamp(params.u_min, params.u_max)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    pub mass: f64,
    pub inertia_diag: [f64; 3],
    pub arm_length: f64,
    /// Yaw drag torque per newton of thrust, in meters.
    pub torque_coeff: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    /// Certified translational acceleration bound used by the range analysis.
    pub a_max: f64,
    /// Collision radius of the airframe.
    pub radius: f64,
    pub gravity: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia_diag: [0.005, 0.005, 0.009],
            arm_length: 0.17,
            torque_coeff: 0.016,
            u_min: 0.0,
            u_max: 6.0,
            v_max: 1.5,
            a_max: 2.0,
            radius: 0.2,
            gravity: 9.81,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: &str| Err(DynamicsError::InvalidParams(msg.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if self.inertia_diag.iter().any(|&j| !(j > 0.0)) {
            return bad("inertia must be componentwise positive");
        }
        if !(self.u_min >= 0.0 && self.u_min < self.u_max) {
            return bad("thrust limits must satisfy 0 <= u_min < u_max");
        }
        if !(self.v_max >= 0.0) || !(self.a_max >= 0.0) || !(self.radius >= 0.0) {
            return bad("v_max, a_max and radius must be nonnegative");
        }
        if !(self.gravity > 0.0) || !(self.arm_length > 0.0) {
            return bad("gravity and arm length must be positive");
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }

    fn inertia(&self) -> Vector3<f64> {
        Vector3::from(self.inertia_diag)
    }

    /// Maps rotor thrusts to body torques (roll, pitch, yaw).
    pub fn mixer(&self) -> SMatrix<f64, 3, 4> {
        let a = self.arm_length / std::f64::consts::SQRT_2;
        let c = self.torque_coeff;
        SMatrix::<f64, 3, 4>::new(
            a, a, -a, -a, //
            -a, a, a, -a, //
            c, -c, c, -c,
        )
    }
}

/// Result of [`max_translational_accel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelBound {
    /// The configured, certified bound.
    pub a_max: f64,
    /// `4 u_max / m - g`, what the thrust limits allow straight up.
    pub physics_bound: f64,
    pub consistent: bool,
}

pub fn max_translational_accel(params: &QuadParams) -> AccelBound {
    let physics_bound = 4.0 * params.u_max / params.mass - params.gravity;
    AccelBound {
        a_max: params.a_max,
        physics_bound,
        consistent: params.a_max <= physics_bound,
    }
}

/// Body z axis expressed in the inertial frame, `R(q) e3`.
pub fn thrust_axis(q: &Vector4<f64>) -> Vector3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Vector3::new(
        2.0 * (x * z + w * y),
        2.0 * (y * z - w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Derivative of [`thrust_axis`] with respect to (w, x, y, z).
pub fn thrust_axis_jacobian(q: &Vector4<f64>) -> SMatrix<f64, 3, 4> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 3, 4>::new(
        2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x, //
        -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y, //
        2.0 * w, -2.0 * x, -2.0 * y, 2.0 * z,
    )
}

/// Translational acceleration produced by `cmd` at attitude `q`.
pub fn linear_acceleration(q: &Vector4<f64>, cmd: &InputVector, params: &QuadParams) -> Vector3<f64> {
    thrust_axis(q) * (cmd.sum() / params.mass) - Vector3::new(0.0, 0.0, params.gravity)
}

fn check_finite(state: &StateVector, cmd: &InputVector) -> Result<(), DynamicsError> {
    if !state.iter().all(|c| c.is_finite()) {
        return Err(DynamicsError::NonFinite { what: "state" });
    }
    if !cmd.iter().all(|c| c.is_finite()) {
        return Err(DynamicsError::NonFinite { what: "command" });
    }
    Ok(())
}

/// Continuous-time state derivative.
pub fn derivative(state: &QuadState, cmd: &MotorCommand, params: &QuadParams) -> Result<QuadState, DynamicsError> {
    let x = state.to_vector();
    check_finite(&x, &cmd.u)?;
    Ok(QuadState::from_vector(&vector_field(&x, &cmd.u, params)))
}

/// Unchecked flat-vector form of [`derivative`].
pub fn vector_field(x: &StateVector, u: &InputVector, params: &QuadParams) -> StateVector {
    let v = x.fixed_rows::<3>(VEL);
    let q = x.fixed_rows::<4>(QUAT).into_owned();
    let w = x.fixed_rows::<3>(RATE).into_owned();
    let inertia = params.inertia();

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(POS).copy_from(&v);
    dx.fixed_rows_mut::<3>(VEL).copy_from(&linear_acceleration(&q, u, params));
    dx.fixed_rows_mut::<4>(QUAT).copy_from(&(omega_matrix(&w) * q * 0.5));
    let torque = params.mixer() * u;
    let jw = inertia.component_mul(&w);
    dx.fixed_rows_mut::<3>(RATE).copy_from(&(torque - w.cross(&jw)).component_div(&inertia));
    dx
}

/// `q_dot = 0.5 * Omega(w) q` for `q = (w, x, y, z)`.
fn omega_matrix(w: &Vector3<f64>) -> SMatrix<f64, 4, 4> {
    let (a, b, c) = (w[0], w[1], w[2]);
    SMatrix::<f64, 4, 4>::new(
        0.0, -a, -b, -c, //
        a, 0.0, c, -b, //
        b, -c, 0.0, a, //
        c, b, -a, 0.0,
    )
}

/// `q_dot = 0.5 * Xi(q) w`.
fn xi_matrix(q: &Vector4<f64>) -> SMatrix<f64, 4, 3> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 4, 3>::new(
        -x, -y, -z, //
        w, -z, y, //
        z, w, -x, //
        -y, x, w,
    )
}

fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// Analytic Jacobians of [`vector_field`] with respect to state and input.
pub fn vector_field_jacobians(x: &StateVector, u: &InputVector, params: &QuadParams) -> (StateJacobian, InputJacobian) {
    let q = x.fixed_rows::<4>(QUAT).into_owned();
    let w = x.fixed_rows::<3>(RATE).into_owned();
    let inertia = params.inertia();
    let inv_inertia = Matrix3::from_diagonal(&inertia.map(|j| 1.0 / j));
    let thrust = u.sum();

    let mut fx = StateJacobian::zeros();
    fx.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Matrix3::identity());
    fx.fixed_view_mut::<3, 4>(VEL, QUAT)
        .copy_from(&(thrust_axis_jacobian(&q) * (thrust / params.mass)));
    fx.fixed_view_mut::<4, 4>(QUAT, QUAT).copy_from(&(omega_matrix(&w) * 0.5));
    fx.fixed_view_mut::<4, 3>(QUAT, RATE).copy_from(&(xi_matrix(&q) * 0.5));
    let j = Matrix3::from_diagonal(&inertia);
    let gyro = skew(&w) * j - skew(&(j * w));
    fx.fixed_view_mut::<3, 3>(RATE, RATE).copy_from(&(-inv_inertia * gyro));

    let mut fu = InputJacobian::zeros();
    let axis = thrust_axis(&q) / params.mass;
    for k in 0..INPUT_DIM {
        fu.fixed_view_mut::<3, 1>(VEL, k).copy_from(&axis);
    }
    fu.fixed_view_mut::<3, 4>(RATE, 0).copy_from(&(inv_inertia * params.mixer()));
    (fx, fu)
}

fn renormalize(x: &mut StateVector) {
    let n = x.fixed_rows::<4>(QUAT).norm();
    x.fixed_rows_mut::<4>(QUAT).unscale_mut(n);
}

/// One classical Runge-Kutta step followed by quaternion renormalization.
pub fn step_rk4(state: &QuadState, cmd: &MotorCommand, params: &QuadParams, dt: f64) -> Result<QuadState, DynamicsError> {
    let x = state.to_vector();
    check_finite(&x, &cmd.u)?;
    let next = rk4_vector(&x, &cmd.u, params, dt);
    if !next.iter().all(|c| c.is_finite()) {
        return Err(DynamicsError::NonFinite { what: "propagated state" });
    }
    Ok(QuadState::from_vector(&next))
}

/// Unchecked flat-vector form of [`step_rk4`].
pub fn rk4_vector(x: &StateVector, u: &InputVector, params: &QuadParams, dt: f64) -> StateVector {
    let k1 = vector_field(x, u, params);
    let k2 = vector_field(&(x + k1 * (0.5 * dt)), u, params);
    let k3 = vector_field(&(x + k2 * (0.5 * dt)), u, params);
    let k4 = vector_field(&(x + k3 * dt), u, params);
    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    renormalize(&mut next);
    next
}

/// [`rk4_vector`] together with its Jacobians (renormalization included).
pub fn rk4_with_jacobians(
    x: &StateVector,
    u: &InputVector,
    params: &QuadParams,
    dt: f64,
) -> (StateVector, StateJacobian, InputJacobian) {
    let eye = StateJacobian::identity();
    let h = 0.5 * dt;

    let k1 = vector_field(x, u, params);
    let (a1, b1) = vector_field_jacobians(x, u, params);

    let x2 = x + k1 * h;
    let k2 = vector_field(&x2, u, params);
    let (a2, b2) = vector_field_jacobians(&x2, u, params);
    let dk2_dx = a2 * (eye + a1 * h);
    let dk2_du = a2 * (b1 * h) + b2;

    let x3 = x + k2 * h;
    let k3 = vector_field(&x3, u, params);
    let (a3, b3) = vector_field_jacobians(&x3, u, params);
    let dk3_dx = a3 * (eye + dk2_dx * h);
    let dk3_du = a3 * (dk2_du * h) + b3;

    let x4 = x + k3 * dt;
    let k4 = vector_field(&x4, u, params);
    let (a4, b4) = vector_field_jacobians(&x4, u, params);
    let dk4_dx = a4 * (eye + dk3_dx * dt);
    let dk4_du = a4 * (dk3_du * dt) + b4;

    let s = dt / 6.0;
    let raw = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * s;
    let mut jx = eye + (a1 + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * s;
    let mut ju = (b1 + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * s;

    // Chain through q -> q / |q|.
    let qr = raw.fixed_rows::<4>(QUAT).into_owned();
    let n = qr.norm();
    let qh = qr / n;
    let proj = (SMatrix::<f64, 4, 4>::identity() - qh * qh.transpose()) / n;
    let jq = proj * jx.fixed_rows::<4>(QUAT);
    jx.fixed_rows_mut::<4>(QUAT).copy_from(&jq);
    let jqu = proj * ju.fixed_rows::<4>(QUAT);
    ju.fixed_rows_mut::<4>(QUAT).copy_from(&jqu);

    let mut next = raw;
    next.fixed_rows_mut::<4>(QUAT).copy_from(&qh);
    (next, jx, ju)
}
