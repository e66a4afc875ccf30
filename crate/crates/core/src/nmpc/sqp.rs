//! Gauss-Newton SQP over the condensed multiple-shooting problem.
//!
//! Each iteration linearizes the RK4 shooting map around the current
//! trajectory, eliminates the state deviations through the sensitivities
//! `dx_k = S_k du + s_k`, and solves a dense QP in the input deviations and
//! the slack variables.

use std::time::Instant;

use nalgebra::{Const, DMatrix, DVector, Dyn, OMatrix};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_vector, rk4_with_jacobians, InputVector, MotorCommand, QuadParams, QuadState, StateVector, STATE_DIM};

use super::ocp::{Nlp, SolveMode, StageRow};
use super::qp::{solve_qp, QpProblem};

type Sensitivity = OMatrix<f64, Const<STATE_DIM>, Dyn>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Solved,
    MaxIters,
    InfeasibleQp,
}

/// Stage states and inputs of a candidate solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<StateVector>,
    pub us: Vec<InputVector>,
}

impl Trajectory {
    /// Forward simulation of a constant input.
    pub fn rollout(x0: &StateVector, u: &InputVector, n: usize, params: &QuadParams, dt: f64) -> Self {
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(*x0);
        for k in 0..n {
            let next = rk4_vector(&xs[k], u, params, dt);
            xs.push(next);
        }
        Self { xs, us: vec![*u; n] }
    }

    /// Forward simulation of an input sequence.
    pub fn simulate(x0: &StateVector, us: Vec<InputVector>, params: &QuadParams, dt: f64) -> Self {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(*x0);
        for (k, u) in us.iter().enumerate() {
            let next = rk4_vector(&xs[k], u, params, dt);
            xs.push(next);
        }
        Self { xs, us }
    }

    /// Drops the first stage and repeats the last input at the tail.
    pub fn shifted(&self, params: &QuadParams, dt: f64) -> Self {
        let n = self.us.len();
        let mut us: Vec<InputVector> = self.us[1..].to_vec();
        us.push(self.us[n - 1]);
        let mut xs: Vec<StateVector> = self.xs[1..].to_vec();
        xs.push(rk4_vector(&self.xs[n], &self.us[n - 1], params, dt));
        Self { xs, us }
    }

    pub fn n_steps(&self) -> usize {
        self.us.len()
    }

    /// Largest shooting defect component.
    pub fn max_defect(&self, params: &QuadParams, dt: f64) -> f64 {
        (0..self.n_steps())
            .map(|k| (rk4_vector(&self.xs[k], &self.us[k], params, dt) - self.xs[k + 1]).amax())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_traj: Vec<MotorCommand>,
    pub x_traj: Vec<QuadState>,
    /// One slack per barrier row, stage-major.
    pub ecbf_slacks: Vec<f64>,
    /// One slack per stage shared by the speed and acceleration rows.
    pub envelope_slacks: Vec<f64>,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub cost: f64,
    pub solve_time_s: f64,
}

impl OcpSolution {
    /// First-stage input, clamped onto the thrust box.
    pub fn applied(&self, params: &QuadParams) -> MotorCommand {
        self.u_traj[0].clamped(params)
    }

    pub fn max_ecbf_slack(&self) -> f64 {
        self.ecbf_slacks.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_slack(&self) -> f64 {
        self.ecbf_slacks.iter().chain(self.envelope_slacks.iter()).copied().fold(0.0, f64::max)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory { xs: self.x_traj.iter().map(QuadState::to_vector).collect(), us: self.u_traj.iter().map(|u| u.u).collect() }
    }
}

/// Condensed QP of one SQP iteration.
struct Subproblem {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    sens: Vec<(Sensitivity, StateVector)>,
}

fn stage_sensitivities(nlp: &Nlp, traj: &Trajectory) -> Vec<(Sensitivity, StateVector)> {
    let n = nlp.n_steps();
    let nu = nlp.n_inputs();
    let dt = nlp.cfg.dt;
    let mut out = Vec::with_capacity(n + 1);
    let mut s = Sensitivity::zeros(nu);
    let mut offset = nlp.x0 - traj.xs[0];
    out.push((s.clone(), offset));
    for k in 0..n {
        let (next, jx, ju) = rk4_with_jacobians(&traj.xs[k], &traj.us[k], &nlp.params, dt);
        let defect = next - traj.xs[k + 1];
        s = jx * &s;
        s.fixed_columns_mut::<4>(4 * k).copy_from(&ju);
        offset = jx * offset + defect;
        out.push((s.clone(), offset));
    }
    out
}

/// Writes the linearized row `g_x dx_k + g_u du_k + slack >= -value`.
fn write_row(
    a: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    row: usize,
    stage_row: &StageRow,
    sens: &(Sensitivity, StateVector),
    input_stage: Option<usize>,
    slack_col: usize,
) {
    let (s, offset) = sens;
    let gs = stage_row.d_x.transpose() * s;
    for c in 0..gs.ncols() {
        a[(row, c)] = gs[c];
    }
    if let Some(k) = input_stage {
        for r in 0..4 {
            a[(row, 4 * k + r)] += stage_row.d_u[r];
        }
    }
    a[(row, slack_col)] = 1.0;
    b[row] = -stage_row.value - stage_row.d_x.dot(offset);
}

fn build_subproblem(nlp: &Nlp, traj: &Trajectory) -> Subproblem {
    let n = nlp.n_steps();
    let nu = nlp.n_inputs();
    let m = nlp.neighbors.len();
    let n_ecbf = nlp.n_ecbf_rows();
    let n_env = nlp.n_envelope_slacks();
    let nz = nlp.n_decision();
    let sens = stage_sensitivities(nlp, traj);

    let mut hessian = DMatrix::<f64>::zeros(nz, nz);
    let mut linear = DVector::<f64>::zeros(nz);
    let qw = StateVector::from_column_slice(&nlp.cfg.state_weights);
    for (k, (s, offset)) in sens.iter().enumerate().skip(1) {
        let cols = 4 * k;
        let s_used = s.columns(0, cols);
        let weighted = DMatrix::from_fn(STATE_DIM, cols, |r, c| qw[r] * s_used[(r, c)]);
        let block = s_used.transpose() * &weighted;
        let mut h = hessian.view_mut((0, 0), (cols, cols));
        h += block * 2.0;
        let resid = traj.xs[k] + offset - nlp.x_ref[k];
        let g = weighted.transpose() * resid * 2.0;
        let mut l = linear.rows_mut(0, cols);
        l += g;
    }
    for k in 0..n {
        for r in 0..4 {
            let i = 4 * k + r;
            let w = nlp.cfg.input_weights[r];
            hessian[(i, i)] += 2.0 * w + nlp.cfg.step_damping;
            linear[i] += 2.0 * w * (traj.us[k][r] - nlp.u_ref[r]);
        }
    }
    for i in nu..nz {
        hessian[(i, i)] = nlp.cfg.slack_quadratic;
        linear[i] = nlp.cfg.slack_penalty;
    }

    let rows = nlp.n_inequality_rows();
    let mut a = DMatrix::<f64>::zeros(rows, nz);
    let mut b = DVector::<f64>::zeros(rows);
    let mut row = 0;
    let (u_min, u_max) = (nlp.params.u_min, nlp.params.u_max);
    for k in 0..n {
        for r in 0..4 {
            let i = 4 * k + r;
            let u = traj.us[k][r];
            a[(row, i)] = 1.0;
            b[row] = u_min - u;
            a[(row + 1, i)] = -1.0;
            b[row + 1] = u - u_max;
            row += 2;
        }
    }
    for k in 0..nlp.ecbf_stages() {
        for j in 0..m {
            let sr = nlp.ecbf_row(k, j, &traj.xs[k], &traj.us[k]);
            write_row(&mut a, &mut b, row, &sr, &sens[k], Some(k), nu + k * m + j);
            row += 1;
        }
    }
    for i in 0..n_ecbf + n_env {
        a[(row, nu + i)] = 1.0;
        row += 1;
    }
    if n_env > 0 {
        let env0 = nu + n_ecbf;
        for k in 0..n {
            if nlp.cfg.speed_cap {
                let sr = nlp.speed_row(&traj.xs[k + 1]);
                write_row(&mut a, &mut b, row, &sr, &sens[k + 1], None, env0 + k);
                row += 1;
            }
            if nlp.cfg.accel_limit {
                let sr = nlp.accel_row(&traj.xs[k], &traj.us[k]);
                write_row(&mut a, &mut b, row, &sr, &sens[k], Some(k), env0 + k);
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, rows);
    Subproblem { hessian, linear, a_in: a, b_in: b, sens }
}

/// Violation measure used by the line search: slack-weighted constraint
/// violation plus defects, on top of the tracking cost.
fn merit(nlp: &Nlp, traj: &Trajectory) -> f64 {
    let pen = nlp.cfg.slack_penalty;
    let mut viol = 0.0;
    for k in 0..nlp.ecbf_stages() {
        for j in 0..nlp.neighbors.len() {
            viol += (-nlp.ecbf_row(k, j, &traj.xs[k], &traj.us[k]).value).max(0.0);
        }
    }
    for k in 0..nlp.n_steps() {
        let mut env: f64 = 0.0;
        if nlp.cfg.speed_cap {
            env = env.max(-nlp.speed_row(&traj.xs[k + 1]).value);
        }
        if nlp.cfg.accel_limit {
            env = env.max(-nlp.accel_row(&traj.xs[k], &traj.us[k]).value);
        }
        viol += env.max(0.0);
    }
    let mut defects = (nlp.x0 - traj.xs[0]).abs().sum();
    for k in 0..nlp.n_steps() {
        defects += (rk4_vector(&traj.xs[k], &traj.us[k], &nlp.params, nlp.cfg.dt) - traj.xs[k + 1]).abs().sum();
    }
    nlp.tracking_cost(&traj.xs, &traj.us) + pen * (viol + defects)
}

/// Moves along the QP step. Inputs are projected onto the thrust box to
/// remove round-off from the QP's feasibility tolerance.
fn take_step(traj: &Trajectory, sens: &[(Sensitivity, StateVector)], du: &DVector<f64>, alpha: f64, params: &QuadParams) -> Trajectory {
    let xs = traj
        .xs
        .iter()
        .zip(sens)
        .map(|(x, (s, offset))| x + (s * du + offset) * alpha)
        .collect();
    let us = traj
        .us
        .iter()
        .enumerate()
        .map(|(k, u)| (u + du.fixed_rows::<4>(4 * k) * alpha).map(|c| c.clamp(params.u_min, params.u_max)))
        .collect();
    Trajectory { xs, us }
}

/// Runs the SQP from `warm_start`, or from a hover rollout when absent or
/// dimensionally incompatible.
pub fn solve_sqp(nlp: &Nlp, warm_start: Option<&Trajectory>) -> OcpSolution {
    let started = Instant::now();
    let n = nlp.n_steps();
    let nu = nlp.n_inputs();
    let params = &nlp.params;
    let mut traj = match warm_start {
        Some(t) if t.n_steps() == n => Trajectory {
            xs: t.xs.clone(),
            us: t.us.iter().map(|u| u.map(|c| c.clamp(params.u_min, params.u_max))).collect(),
        },
        _ => Trajectory::rollout(&nlp.x0, &nlp.u_ref, n, params, nlp.cfg.dt),
    };
    let line_search = nlp.cfg.mode == SolveMode::Full || nlp.cfg.rti_line_search;
    if line_search {
        traj = Trajectory::simulate(&nlp.x0, traj.us, params, nlp.cfg.dt);
    }
    let max_iters = match nlp.cfg.mode {
        SolveMode::Rti => 1,
        SolveMode::Full => nlp.cfg.max_sqp_iters,
    };

    let mut slacks = DVector::<f64>::zeros(nlp.n_decision() - nu);
    let mut kkt_residual = f64::INFINITY;
    let mut status = SolveStatus::MaxIters;
    let mut iterations = 0;
    let mut qp_iterations = 0;
    let mut current_merit = merit(nlp, &traj);

    while iterations < max_iters {
        iterations += 1;
        let sub = build_subproblem(nlp, &traj);
        let problem = QpProblem { hessian: &sub.hessian, linear: &sub.linear, a_eq: None, a_in: Some((&sub.a_in, &sub.b_in)) };
        let sol = match solve_qp(&problem) {
            Ok(sol) => sol,
            Err(_) => {
                status = SolveStatus::InfeasibleQp;
                break;
            }
        };
        qp_iterations += sol.iterations;
        let du = sol.z.rows(0, nu).into_owned();
        slacks = sol.z.rows(nu, sol.z.len() - nu).map(|s| s.max(0.0));

        let (next, step_norm) = match line_search {
            false => {
                let next = take_step(&traj, &sub.sens, &du, 1.0, params);
                let step = step_inf_norm(&sub.sens, &du);
                (next, step)
            }
            true => {
                let mut alpha = 1.0;
                let mut accepted = None;
                while alpha > 1e-3 {
                    // Trial points are re-simulated from x0 so that the merit
                    // compares defect-free trajectories.
                    let stepped = take_step(&traj, &sub.sens, &du, alpha, params);
                    let trial = Trajectory::simulate(&nlp.x0, stepped.us, params, nlp.cfg.dt);
                    let m = merit(nlp, &trial);
                    if m <= current_merit {
                        current_merit = m;
                        accepted = Some((trial, alpha * step_inf_norm(&sub.sens, &du)));
                        break;
                    }
                    alpha *= 0.5;
                }
                match accepted {
                    Some(a) => a,
                    // No decrease along the step: stationary to line-search precision.
                    None => (traj.clone(), 0.0),
                }
            }
        };
        traj = next;
        kkt_residual = step_norm.max(traj.max_defect(params, nlp.cfg.dt)).max((nlp.x0 - traj.xs[0]).amax());
        if kkt_residual <= nlp.cfg.kkt_tol {
            status = SolveStatus::Solved;
            break;
        }
    }

    let n_ecbf = nlp.n_ecbf_rows();
    OcpSolution {
        u_traj: traj.us.iter().map(|u| MotorCommand { u: *u }).collect(),
        x_traj: traj.xs.iter().map(QuadState::from_vector).collect(),
        ecbf_slacks: slacks.rows(0, n_ecbf).iter().copied().collect(),
        envelope_slacks: slacks.rows(n_ecbf, slacks.len() - n_ecbf).iter().copied().collect(),
        kkt_residual,
        status,
        iterations,
        qp_iterations,
        cost: nlp.tracking_cost(&traj.xs, &traj.us),
        solve_time_s: started.elapsed().as_secs_f64(),
    }
}

fn step_inf_norm(sens: &[(Sensitivity, StateVector)], du: &DVector<f64>) -> f64 {
    let dx = sens.iter().map(|(s, off)| (s * du + off).amax()).fold(0.0, f64::max);
    dx.max(du.amax())
}

/// Per-agent solver holding the previous solution for warm starting.
/// Not reentrant: one instance per agent.
#[derive(Debug, Clone, Default)]
pub struct NmpcController {
    last: Option<Trajectory>,
}

impl NmpcController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.last = None;
    }

    /// Solves with the shifted previous solution as warm start.
    pub fn solve(&mut self, nlp: &Nlp) -> OcpSolution {
        let warm = self.last.as_ref().map(|t| t.shifted(&nlp.params, nlp.cfg.dt));
        let sol = solve_sqp(nlp, warm.as_ref());
        if sol.status != SolveStatus::InfeasibleQp {
            self.last = Some(sol.trajectory());
        }
        sol
    }
}
