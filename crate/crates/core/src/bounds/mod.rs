//! Minimum detection ranges that preserve the ECBF guarantees.
//!
//! A neighbor first seen at distance `R` (straight ahead, closing at
//! `v_rel_max`) must leave three quadratic conditions satisfied at that
//! instant:
//!
//! ```text
//!   (i)   alpha1 R^2 + b R + 2 v^2 - alpha1 D^2 >= 0     (ECBF feasible)
//!   (ii)  p1 R^2 - 2 v R + p1 D^2             >= 0     (nu1 >= 0)
//!   (iii) R >= D                                       (h >= 0)
//! ```
//!
//! with `b = -2 (a_max + alpha2 v)` for the conservative bound (any action is
//! safe) and `b = 2 (a_max - alpha2 v)` for the non-conservative one (some
//! action is safe). Every condition holds beyond its larger root, so the
//! combined bound is the largest applicable threshold.

pub mod oracle;

use serde::Serialize;
use thiserror::Error;

use crate::ecbf::{EcbfGains, SafetyGeometry};

pub use oracle::{min_range_oracle, OracleResult, SwapScenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("invalid range-bound inputs: {0}")]
    InvalidInputs(&'static str),
    #[error("internal consistency error: condition (i) has negative discriminant {0}")]
    NegativeDiscriminant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeBoundInputs {
    pub gains: EcbfGains,
    pub geom: SafetyGeometry,
    pub a_max_i: f64,
    /// `v_max,i + v_max,j`; just `v_max,i` for static obstacles.
    pub v_rel_max: f64,
    /// Pole used in condition (ii).
    pub p1: f64,
}

impl RangeBoundInputs {
    /// Uses the slower pole for condition (ii), which gives the larger threshold.
    pub fn new(gains: EcbfGains, geom: SafetyGeometry, a_max_i: f64, v_rel_max: f64) -> Self {
        Self { gains, geom, a_max_i, v_rel_max, p1: gains.p1.min(gains.p2) }
    }

    /// Two identical vehicles closing head-on, each at `v_max`.
    pub fn vehicle_pair(gains: EcbfGains, d_s: f64, r_q: f64, a_max: f64, v_max: f64) -> Self {
        Self::new(gains, SafetyGeometry::new(d_s, r_q, r_q), a_max, 2.0 * v_max)
    }

    /// A vehicle approaching a static obstacle of radius `r_o`.
    pub fn static_obstacle(gains: EcbfGains, d_so: f64, r_q: f64, r_o: f64, a_max: f64, v_max: f64) -> Self {
        Self::new(gains, SafetyGeometry::new(d_so, r_q, r_o), a_max, v_max)
    }

    pub fn with_pole(self, p1: f64) -> Self {
        Self { p1, ..self }
    }

    fn validate(&self) -> Result<(), BoundError> {
        let g = &self.geom;
        if !(g.margin >= 0.0 && g.r_i >= 0.0 && g.r_j >= 0.0 && g.safety_distance() > 0.0) {
            return Err(BoundError::InvalidInputs("geometry must be nonnegative with a positive safety distance"));
        }
        if !(self.a_max_i >= 0.0) || !(self.v_rel_max >= 0.0) {
            return Err(BoundError::InvalidInputs("a_max and v_rel_max must be nonnegative"));
        }
        if !(self.p1 > 0.0) {
            return Err(BoundError::InvalidInputs("pole must be positive"));
        }
        if self.p1 != self.gains.p1 && self.p1 != self.gains.p2 {
            return Err(BoundError::InvalidInputs("p1 must be one of the gains' poles"));
        }
        Ok(())
    }
}

/// Larger root of a condition polynomial, or its absence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    At(f64),
    /// Negative discriminant: the condition holds for every `R`.
    UnboundedBelow,
}

impl Threshold {
    pub fn value(&self) -> Option<f64> {
        match self {
            Threshold::At(r) => Some(*r),
            Threshold::UnboundedBelow => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeBoundResult {
    /// Unbounded below only for the non-conservative bound, when the ego
    /// acceleration budget alone already satisfies condition (i) at any range.
    pub threshold_i: Threshold,
    pub threshold_ii: Threshold,
    pub threshold_iii: f64,
    /// Largest applicable threshold; all three conditions hold beyond it.
    pub bound: f64,
    /// Minimum over the real thresholds, for comparison with the literal
    /// closed-form statement.
    pub literal_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Conservative,
    NonConservative,
}

/// Coefficients `(a, b, c)` of condition (i).
pub fn condition_i_coefficients(input: &RangeBoundInputs, kind: BoundKind) -> (f64, f64, f64) {
    let (a1, a2) = (input.gains.alpha1, input.gains.alpha2);
    let v = input.v_rel_max;
    let d = input.geom.safety_distance();
    let b = match kind {
        BoundKind::Conservative => -2.0 * (input.a_max_i + a2 * v),
        BoundKind::NonConservative => 2.0 * (input.a_max_i - a2 * v),
    };
    (a1, b, 2.0 * v * v - a1 * d * d)
}

/// Coefficients `(a, b, c)` of condition (ii).
pub fn condition_ii_coefficients(input: &RangeBoundInputs) -> (f64, f64, f64) {
    let d = input.geom.safety_distance();
    (input.p1, -2.0 * input.v_rel_max, input.p1 * d * d)
}

/// Larger root of `a x^2 + b x + c` for `a > 0`, evaluated without
/// cancellation.
fn larger_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    if b <= 0.0 {
        Some((-b + s) / (2.0 * a))
    } else if s > b {
        // c < 0: the roots straddle zero.
        Some(2.0 * c / (-b - s))
    } else {
        Some((-b + s) / (2.0 * a))
    }
}

fn evaluate(input: &RangeBoundInputs, kind: BoundKind) -> Result<RangeBoundResult, BoundError> {
    input.validate()?;
    let (a, b, c) = condition_i_coefficients(input, kind);
    let threshold_i = match (larger_root(a, b, c), kind) {
        (Some(r), _) => Threshold::At(r),
        (None, BoundKind::NonConservative) => Threshold::UnboundedBelow,
        // With real poles alpha2^2 >= 4 alpha1, which keeps this
        // discriminant positive; reaching here means the inputs are broken.
        (None, BoundKind::Conservative) => return Err(BoundError::NegativeDiscriminant(b * b - 4.0 * a * c)),
    };
    let (a2, b2, c2) = condition_ii_coefficients(input);
    let threshold_ii = match larger_root(a2, b2, c2) {
        Some(r) => Threshold::At(r),
        None => Threshold::UnboundedBelow,
    };
    let threshold_iii = input.geom.safety_distance();

    let real = [threshold_i.value(), threshold_ii.value(), Some(threshold_iii)];
    let bound = real.iter().flatten().copied().fold(threshold_iii, f64::max);
    let literal_min = real.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    Ok(RangeBoundResult { threshold_i, threshold_ii, threshold_iii, bound, literal_min })
}

/// Range beyond which every admissible ego action keeps the pair safe.
pub fn conservative_bound(input: &RangeBoundInputs) -> Result<RangeBoundResult, BoundError> {
    evaluate(input, BoundKind::Conservative)
}

/// Range beyond which at least one admissible ego action keeps the pair safe.
pub fn nonconservative_bound(input: &RangeBoundInputs) -> Result<RangeBoundResult, BoundError> {
    evaluate(input, BoundKind::NonConservative)
}

/// Adds the worst-case closing distance covered during one control interval.
pub fn discretize_bound(range: f64, dt: f64, v_rel_max: f64) -> f64 {
    range + dt * v_rel_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guarantee {
    /// At or beyond the conservative bound: joint forward invariance holds.
    Guaranteed,
    /// Only the non-conservative bound is met: each pair alone is feasible,
    /// jointly nothing is implied.
    PairwiseOnly,
    NoGuarantee,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairCompatibility {
    pub index: usize,
    pub activation_distance: f64,
    pub conservative: f64,
    pub nonconservative: f64,
    pub verdict: Guarantee,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatibilityReport {
    pub pairs: Vec<PairCompatibility>,
}

impl CompatibilityReport {
    pub fn all_guaranteed(&self) -> bool {
        self.pairs.iter().all(|p| p.verdict == Guarantee::Guaranteed)
    }
}

pub fn compatibility_check(pairs: &[RangeBoundInputs], ranges: &[f64]) -> Result<CompatibilityReport, BoundError> {
    if pairs.len() != ranges.len() {
        return Err(BoundError::InvalidInputs("one activation distance per pair is required"));
    }
    let pairs = pairs
        .iter()
        .zip(ranges)
        .enumerate()
        .map(|(index, (input, &activation_distance))| {
            let conservative = conservative_bound(input)?.bound;
            let nonconservative = nonconservative_bound(input)?.bound;
            let verdict = if activation_distance >= conservative {
                Guarantee::Guaranteed
            } else if activation_distance >= nonconservative {
                Guarantee::PairwiseOnly
            } else {
                Guarantee::NoGuarantee
            };
            Ok(PairCompatibility { index, activation_distance, conservative, nonconservative, verdict })
        })
        .collect::<Result<_, BoundError>>()?;
    Ok(CompatibilityReport { pairs })
}
