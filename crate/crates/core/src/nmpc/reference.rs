//! Minimum-jerk straight-line references.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Peak of `ds/dtau` for `s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5`.
pub const QUINTIC_PEAK_SPEED: f64 = 15.0 / 8.0;
/// Peak of `|d2s/dtau2|`, reached at `tau = 1/2 -+ sqrt(3)/6`.
pub const QUINTIC_PEAK_ACCEL: f64 = 5.773_502_691_896_258; // 10 / sqrt(3)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

/// Rest-to-rest quintic from `start` to `goal`, beginning at `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinJerkSegment {
    pub start: Vector3<f64>,
    pub goal: Vector3<f64>,
    pub t0: f64,
    pub duration: f64,
}

impl MinJerkSegment {
    /// Duration is chosen so the peak speed is `v_max`, stretched further if
    /// the peak acceleration would exceed `a_max`.
    pub fn new(start: Vector3<f64>, goal: Vector3<f64>, v_max: f64, a_max: Option<f64>) -> Self {
        debug_assert!(v_max > 0.0);
        let length = (goal - start).norm();
        let mut duration = QUINTIC_PEAK_SPEED * length / v_max;
        if let Some(a) = a_max.filter(|a| *a > 0.0) {
            duration = duration.max((QUINTIC_PEAK_ACCEL * length / a).sqrt());
        }
        Self { start, goal, t0: 0.0, duration }
    }

    pub fn starting_at(self, t0: f64) -> Self {
        Self { t0, ..self }
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + self.duration
    }

    pub fn peak_speed(&self) -> f64 {
        if self.duration > 0.0 {
            QUINTIC_PEAK_SPEED * (self.goal - self.start).norm() / self.duration
        } else {
            0.0
        }
    }

    pub fn sample(&self, t: f64) -> RefPoint {
        let delta = self.goal - self.start;
        if self.duration <= 0.0 || delta.norm() == 0.0 {
            return RefPoint { p: self.goal, v: Vector3::zeros(), a: Vector3::zeros() };
        }
        let tau = ((t - self.t0) / self.duration).clamp(0.0, 1.0);
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let s = t3 * (10.0 - 15.0 * tau + 6.0 * t2);
        let ds = 30.0 * t2 * (1.0 - tau) * (1.0 - tau) / self.duration;
        let dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau) / (self.duration * self.duration);
        RefPoint { p: self.start + delta * s, v: delta * ds, a: delta * dds }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degenerate_segment_is_constant() {
        let p = Vector3::new(1.0, 2.0, 1.0);
        let seg = MinJerkSegment::new(p, p, 1.5, Some(2.0));
        for t in [0.0, 1.0, 5.0] {
            let r = seg.sample(t);
            assert_eq!(r.p, p);
            assert_eq!(r.v, Vector3::zeros());
        }
        assert_eq!(seg.peak_speed(), 0.0);
    }

    #[test]
    fn six_meter_segment_takes_seven_and_a_half_seconds() {
        let seg = MinJerkSegment::new(Vector3::zeros(), Vector3::new(6.0, 0.0, 0.0), 1.5, Some(2.0));
        assert_relative_eq!(seg.duration, 7.5, epsilon = 1e-12);
        assert_relative_eq!(seg.sample(3.75).v.norm(), 1.5, epsilon = 1e-12);
        // Brute-force the peak speed on a fine grid.
        let peak = (0..=10_000).map(|i| seg.sample(7.5 * i as f64 / 10_000.0).v.norm()).fold(0.0, f64::max);
        assert!((peak - 1.5).abs() < 1e-6);
    }

    #[test]
    fn midpoint_is_halfway() {
        let a = Vector3::new(-3.0, 1.0, 1.0);
        let b = Vector3::new(4.0, -2.0, 1.5);
        let seg = MinJerkSegment::new(a, b, 1.0, None).starting_at(2.0);
        assert_relative_eq!(seg.sample(2.0 + seg.duration / 2.0).p, (a + b) / 2.0, epsilon = 1e-12);
        let end = seg.sample(seg.end_time() + 1.0);
        assert_relative_eq!(end.p, b, epsilon = 1e-12);
        assert_eq!(end.v, Vector3::zeros());
    }

    #[test]
    fn short_segment_respects_acceleration() {
        let seg = MinJerkSegment::new(Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0), 1.5, Some(2.0));
        let peak = (0..=10_000).map(|i| seg.sample(seg.duration * i as f64 / 10_000.0).a.norm()).fold(0.0, f64::max);
        assert!(peak <= 2.0 + 1e-6);
        assert!(seg.peak_speed() < 1.5);
    }

    #[test]
    fn velocity_is_derivative_of_position() {
        let seg = MinJerkSegment::new(Vector3::zeros(), Vector3::new(3.0, 4.0, 0.0), 1.2, Some(2.0));
        let h = 1e-6;
        for t in [0.3, 1.0, 2.2, 4.0] {
            let fd = (seg.sample(t + h).p - seg.sample(t - h).p) / (2.0 * h);
            assert!((fd - seg.sample(t).v).norm() < 1e-6);
            let fda = (seg.sample(t + h).v - seg.sample(t - h).v) / (2.0 * h);
            assert!((fda - seg.sample(t).a).norm() < 1e-5);
        }
    }
}
