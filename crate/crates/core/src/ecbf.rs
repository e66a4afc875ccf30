//! Pairwise exponential control barrier functions of relative degree two.
//!
//! For an ego vehicle `i` and a neighbor `j` (another vehicle or a static
//! obstacle) the barrier is `h = |p_rel|^2 - D^2` with `D = d + r_i + r_j`.
//! Its derivatives are taken under two modelling assumptions: the neighbor
//! keeps a constant velocity, and the relative velocity always points
//! straight at the ego (`v~ = -|v_rel| e_ij`). The ECBF condition is
//!
//! ```text
//!   G = h'' + alpha2 h' + alpha1 h >= 0
//! ```

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcbfError {
    #[error("invalid ECBF gains (alpha1 = {alpha1}, alpha2 = {alpha2}): {reason}")]
    InvalidGains { alpha1: f64, alpha2: f64, reason: &'static str },
    #[error("relative position is zero; the pair direction is undefined")]
    DegenerateGeometry,
}

/// Computes the pole magnitudes `(p1, p2)`, `p1 <= p2`, such that `-p1` and
/// `-p2` are the roots of `s^2 + alpha2 s + alpha1`.
pub fn poles(alpha1: f64, alpha2: f64) -> Result<(f64, f64), EcbfError> {
    let invalid = |reason| EcbfError::InvalidGains { alpha1, alpha2, reason };
    if !(alpha1 > 0.0 && alpha2 > 0.0) || !alpha1.is_finite() || !alpha2.is_finite() {
        return Err(invalid("gains must be finite and strictly positive"));
    }
    let disc = alpha2 * alpha2 - 4.0 * alpha1;
    if disc < 0.0 {
        return Err(invalid("complex poles (alpha2^2 < 4 alpha1)"));
    }
    let p2 = 0.5 * (alpha2 + disc.sqrt());
    // Vieta form for the small root avoids cancellation.
    let p1 = alpha1 / p2;
    if !(p1 > 0.0) {
        return Err(invalid("nonpositive pole"));
    }
    Ok((p1, p2))
}

/// Validated ECBF gains together with their poles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGains", into = "RawGains")]
pub struct EcbfGains {
    pub alpha1: f64,
    pub alpha2: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawGains {
    alpha1: f64,
    alpha2: f64,
}

impl Default for RawGains {
    fn default() -> Self {
        RawGains { alpha1: 36.0, alpha2: 22.0 }
    }
}

impl TryFrom<RawGains> for EcbfGains {
    type Error = EcbfError;
    fn try_from(raw: RawGains) -> Result<Self, Self::Error> {
        EcbfGains::new(raw.alpha1, raw.alpha2)
    }
}

impl From<EcbfGains> for RawGains {
    fn from(g: EcbfGains) -> Self {
        RawGains { alpha1: g.alpha1, alpha2: g.alpha2 }
    }
}

impl EcbfGains {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self, EcbfError> {
        let (p1, p2) = poles(alpha1, alpha2)?;
        Ok(Self { alpha1, alpha2, p1, p2 })
    }

    /// Gains used for all reported experiments: alpha1 = 36, alpha2 = 22.
    pub fn reference() -> Self {
        Self::new(36.0, 22.0).expect("reference gains have real positive poles")
    }
}

impl Default for EcbfGains {
    fn default() -> Self {
        Self::reference()
    }
}

/// Safety margin and radii of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyGeometry {
    /// `d_s` for vehicle pairs, `d_so` for vehicle-obstacle pairs.
    pub margin: f64,
    pub r_i: f64,
    pub r_j: f64,
}

impl SafetyGeometry {
    pub fn new(margin: f64, r_i: f64, r_j: f64) -> Self {
        debug_assert!(margin >= 0.0 && r_i >= 0.0 && r_j >= 0.0);
        Self { margin, r_i, r_j }
    }

    /// `d + r_i + r_j`, the separation at which `h` vanishes.
    pub fn safety_distance(&self) -> f64 {
        self.margin + self.r_i + self.r_j
    }
}

/// Relative kinematics of neighbor `j` seen from ego `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    /// `p_j - p_i`
    pub p_rel: Vector3<f64>,
    /// `v_j - v_i`
    pub v_rel: Vector3<f64>,
}

impl RelativeState {
    pub fn new(p_rel: Vector3<f64>, v_rel: Vector3<f64>) -> Self {
        Self { p_rel, v_rel }
    }

    pub fn between(p_i: &Vector3<f64>, v_i: &Vector3<f64>, p_j: &Vector3<f64>, v_j: &Vector3<f64>) -> Self {
        Self { p_rel: p_j - p_i, v_rel: v_j - v_i }
    }

    pub fn distance(&self) -> f64 {
        self.p_rel.norm()
    }

    /// Unit vector from ego to neighbor.
    pub fn e_ij(&self) -> Result<Vector3<f64>, EcbfError> {
        let n = self.p_rel.norm();
        if n > 0.0 && n.is_finite() {
            Ok(self.p_rel / n)
        } else {
            Err(EcbfError::DegenerateGeometry)
        }
    }
}

pub fn barrier(rel: &RelativeState, geom: &SafetyGeometry) -> f64 {
    let d = geom.safety_distance();
    rel.p_rel.norm_squared() - d * d
}

/// Worst-case relative velocity: full relative speed, pointing from the
/// neighbor straight at the ego.
pub fn conservative_vrel(rel: &RelativeState) -> Result<Vector3<f64>, EcbfError> {
    Ok(-rel.v_rel.norm() * rel.e_ij()?)
}

/// `h' = 2 p_rel . v~ = -2 |p_rel| |v_rel|`; never positive.
pub fn barrier_dot(rel: &RelativeState, _geom: &SafetyGeometry) -> f64 {
    -2.0 * rel.p_rel.norm() * rel.v_rel.norm()
}

/// `h'' = 2 |v~|^2 - 2 p_rel . a_i` with the neighbor unaccelerated.
pub fn barrier_ddot(rel: &RelativeState, accel_i: &Vector3<f64>) -> f64 {
    2.0 * rel.v_rel.norm_squared() - 2.0 * rel.p_rel.dot(accel_i)
}

pub fn ecbf_constraint(rel: &RelativeState, geom: &SafetyGeometry, gains: &EcbfGains, accel_i: &Vector3<f64>) -> f64 {
    barrier_ddot(rel, accel_i) + gains.alpha2 * barrier_dot(rel, geom) + gains.alpha1 * barrier(rel, geom)
}

/// Value of `G` and its partial derivatives with respect to the relative
/// position, relative velocity and ego acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcbfLinearization {
    pub value: f64,
    pub d_p_rel: Vector3<f64>,
    pub d_v_rel: Vector3<f64>,
    pub d_accel: Vector3<f64>,
}

/// Linearizes `G`. With `frozen_speed = Some(s)` the relative speed is held at
/// `s` (no dependence on `v_rel`), which is the stage-0 freezing ablation.
///
/// `|v_rel|` is not differentiable at zero; the zero subgradient is used there.
pub fn linearize_constraint(
    rel: &RelativeState,
    geom: &SafetyGeometry,
    gains: &EcbfGains,
    accel_i: &Vector3<f64>,
    frozen_speed: Option<f64>,
) -> EcbfLinearization {
    let dist = rel.p_rel.norm();
    let d = geom.safety_distance();
    let speed = frozen_speed.unwrap_or_else(|| rel.v_rel.norm());
    let value = 2.0 * speed * speed - 2.0 * rel.p_rel.dot(accel_i) - 2.0 * gains.alpha2 * dist * speed
        + gains.alpha1 * (dist * dist - d * d);

    let unit_p = if dist > 0.0 { rel.p_rel / dist } else { Vector3::zeros() };
    let d_p_rel = -2.0 * accel_i - 2.0 * gains.alpha2 * speed * unit_p + 2.0 * gains.alpha1 * rel.p_rel;
    let d_v_rel = match frozen_speed {
        Some(_) => Vector3::zeros(),
        None if speed > 0.0 => 4.0 * rel.v_rel - 2.0 * gains.alpha2 * dist * rel.v_rel / speed,
        None => Vector3::zeros(),
    };
    EcbfLinearization { value, d_p_rel, d_v_rel, d_accel: -2.0 * rel.p_rel }
}

/// Membership of the first two superlevel sets of the nu-chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialConditionReport {
    pub nu0: f64,
    pub nu1: f64,
    pub in_c0: bool,
    pub in_c1: bool,
    /// Either function sits exactly on zero (closed sets, still admissible).
    pub on_boundary: bool,
}

impl InitialConditionReport {
    pub fn admissible(&self) -> bool {
        self.in_c0 && self.in_c1
    }
}

/// Evaluates `nu0 = h` and `nu1 = h' + p1 h`, using the conservative `h'`.
pub fn validate_initial_conditions(rel: &RelativeState, geom: &SafetyGeometry, gains: &EcbfGains) -> InitialConditionReport {
    let nu0 = barrier(rel, geom);
    let nu1 = barrier_dot(rel, geom) + gains.p1 * nu0;
    const BOUNDARY_TOL: f64 = 1e-12;
    InitialConditionReport {
        nu0,
        nu1,
        in_c0: nu0 >= -BOUNDARY_TOL,
        in_c1: nu1 >= -BOUNDARY_TOL,
        on_boundary: nu0.abs() <= BOUNDARY_TOL || nu1.abs() <= BOUNDARY_TOL,
    }
}
