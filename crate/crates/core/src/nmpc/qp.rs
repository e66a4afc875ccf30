//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 z' H z + c' z
//!     subject to  A_eq z  = b_eq
//!                 A_in z >= b_in
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time, so it is exact (up to rounding) and reports infeasibility only when
//! a violated constraint cannot be satisfied by any primal or dual step.
//!
//! Multipliers follow `H z + c = A_eq' mu + A_in' lambda`, `lambda >= 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (violated constraint {constraint} cannot be satisfied)")]
    Infeasible { constraint: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("iteration limit reached")]
    IterationLimit,
}

/// Borrowed problem data. Constraint matrices are row-per-constraint.
#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub linear: &'a DVector<f64>,
    pub a_eq: Option<(&'a DMatrix<f64>, &'a DVector<f64>)>,
    pub a_in: Option<(&'a DMatrix<f64>, &'a DVector<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub in_duals: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn active_inequalities(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_duals.iter().enumerate().filter(|(_, &l)| l > 0.0).map(|(i, _)| i)
    }
}

/// Scaled KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(problem: &QpProblem<'_>, sol: &QpSolution) -> KktResiduals {
    let mut grad = problem.hessian * &sol.z + problem.linear;
    let mut primal: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut scale = 1.0f64.max(problem.linear.amax());
    if let Some((a, b)) = problem.a_eq {
        grad -= a.transpose() * &sol.eq_duals;
        let r = a * &sol.z - b;
        primal = primal.max(r.amax() / (1.0 + b.amax()));
    }
    if let Some((a, b)) = problem.a_in {
        grad -= a.transpose() * &sol.in_duals;
        let slack = a * &sol.z - b;
        for (i, s) in slack.iter().enumerate() {
            primal = primal.max((-s).max(0.0) / (1.0 + b[i].abs()));
            complementarity = complementarity.max((sol.in_duals[i] * s).abs() / (1.0 + b[i].abs()));
        }
        scale = scale.max(sol.in_duals.amax());
    }
    let dual = sol.in_duals.iter().fold(0.0f64, |m, &l| m.max(-l));
    KktResiduals { stationarity: grad.amax() / scale, primal, dual, complementarity }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Equality { row: usize },
    Inequality { row: usize },
}

/// Upper-triangular solve `R x = b` on the leading `q x q` block.
fn back_substitute(r: &DMatrix<f64>, q: usize, b: &[f64], out: &mut [f64]) {
    for i in (0..q).rev() {
        let mut acc = b[i];
        for j in i + 1..q {
            acc -= r[(i, j)] * out[j];
        }
        out[i] = acc / r[(i, i)];
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let n = m.nrows();
    let data = m.as_mut_slice();
    let (lo, hi) = (i.min(j), i.max(j));
    let (left, right) = data.split_at_mut(hi * n);
    let col_lo = &mut left[lo * n..lo * n + n];
    let col_hi = &mut right[..n];
    let (ci, cj) = if i < j { (col_lo, col_hi) } else { (col_hi, col_lo) };
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a + s * b;
        *y = -s * a + c * b;
    }
}

pub fn solve_qp(problem: &QpProblem<'_>) -> Result<QpSolution, QpError> {
    let n = problem.hessian.nrows();
    if problem.hessian.ncols() != n || problem.linear.len() != n {
        return Err(QpError::DimensionMismatch("hessian and linear term"));
    }
    let (m_eq, m_in) = (
        problem.a_eq.map_or(0, |(a, _)| a.nrows()),
        problem.a_in.map_or(0, |(a, _)| a.nrows()),
    );
    for (a, b) in problem.a_eq.iter().chain(problem.a_in.iter()) {
        if a.ncols() != n || b.len() != a.nrows() {
            return Err(QpError::DimensionMismatch("constraint block"));
        }
    }

    // Constraint normals as contiguous columns.
    let mut normals = DMatrix::<f64>::zeros(n, m_eq + m_in);
    let mut rhs = DVector::<f64>::zeros(m_eq + m_in);
    let mut kinds = Vec::with_capacity(m_eq + m_in);
    if let Some((a, b)) = problem.a_eq {
        normals.columns_mut(0, m_eq).copy_from(&a.transpose());
        rhs.rows_mut(0, m_eq).copy_from(b);
        kinds.extend((0..m_eq).map(|row| Kind::Equality { row }));
    }
    if let Some((a, b)) = problem.a_in {
        normals.columns_mut(m_eq, m_in).copy_from(&a.transpose());
        rhs.rows_mut(m_eq, m_in).copy_from(b);
        kinds.extend((0..m_in).map(|row| Kind::Inequality { row }));
    }
    let norms: Vec<f64> = (0..m_eq + m_in).map(|k| normals.column(k).norm().max(f64::MIN_POSITIVE)).collect();

    let chol = problem.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut z = -chol.solve(problem.linear);
    // J = L^{-T}
    let l = chol.l();
    let mut j = l.transpose().try_inverse().ok_or(QpError::NotPositiveDefinite)?;

    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut mult: Vec<f64> = Vec::with_capacity(n);
    let mut sign = vec![1.0; m_eq + m_in];
    let mut is_active = vec![false; m_eq + m_in];

    let mut d = vec![0.0; n];
    let mut rdir = vec![0.0; n];
    let mut zdir = DVector::<f64>::zeros(n);
    let mut normal = DVector::<f64>::zeros(n);

    let max_iter = 50 * (n + m_eq + m_in) + 100;
    let mut iterations = 0;
    let mut next_eq = 0;
    const FEAS_TOL: f64 = 1e-11;

    loop {
        // Select the constraint to add.
        let p = if next_eq < m_eq {
            next_eq += 1;
            next_eq - 1
        } else {
            let mut worst = None;
            let mut worst_val = 0.0;
            for k in m_eq..m_eq + m_in {
                if is_active[k] {
                    continue;
                }
                let s = normals.column(k).dot(&z) - rhs[k];
                if s < -FEAS_TOL * (1.0 + rhs[k].abs()) {
                    let scaled = s / norms[k];
                    if scaled < worst_val {
                        worst_val = scaled;
                        worst = Some(k);
                    }
                }
            }
            match worst {
                Some(k) => k,
                None => break,
            }
        };

        normal.copy_from(&normals.column(p));
        let mut target = rhs[p];
        let mut slack = normal.dot(&z) - target;
        if matches!(kinds[p], Kind::Equality { .. }) && slack > 0.0 {
            normal.neg_mut();
            target = -target;
            slack = -slack;
            sign[p] = -1.0;
        }
        let _ = target;
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let q = active.len();
            // d = J' n_p
            for (i, di) in d.iter_mut().enumerate() {
                *di = j.column(i).dot(&normal);
            }
            zdir.fill(0.0);
            for i in q..n {
                zdir.axpy(d[i], &j.column(i), 1.0);
            }
            back_substitute(&r, q, &d, &mut rdir);

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for k in 0..q {
                if matches!(kinds[active[k]], Kind::Inequality { .. }) && rdir[k] > 0.0 {
                    let ratio = mult[k] / rdir[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let tail: f64 = d[q..].iter().map(|v| v * v).sum();
            let full: f64 = d.iter().map(|v| v * v).sum();
            let t2 = if tail > 1e-24 * full.max(f64::MIN_POSITIVE) {
                -slack / tail
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible { constraint: p });
            }

            for k in 0..q {
                mult[k] -= t * rdir[k];
            }
            u_new += t;

            if t2.is_finite() {
                z.axpy(t, &zdir, 1.0);
                slack += t * tail;
            }

            if t2.is_finite() && t2 <= t1 {
                // Add p: rotate d[q+1..] into d[q].
                for i in (q + 1..n).rev() {
                    let (c, s, h) = givens(d[i - 1], d[i]);
                    if s != 0.0 {
                        rotate_columns(&mut j, i - 1, i, c, s);
                    }
                    d[i - 1] = h;
                    d[i] = 0.0;
                }
                for i in 0..=q {
                    r[(i, q)] = d[i];
                }
                active.push(p);
                mult.push(u_new);
                is_active[p] = true;
                break;
            }

            // Drop the blocking constraint and retry p.
            let k = drop_at.expect("finite partial step has a blocking constraint");
            is_active[active[k]] = false;
            active.remove(k);
            mult.remove(k);
            for col in k..q - 1 {
                for row in 0..=col + 1 {
                    r[(row, col)] = r[(row, col + 1)];
                }
            }
            for row in 0..q {
                r[(row, q - 1)] = 0.0;
            }
            for i in k..q - 1 {
                let (c, s, h) = givens(r[(i, i)], r[(i + 1, i)]);
                if s == 0.0 {
                    continue;
                }
                r[(i, i)] = h;
                r[(i + 1, i)] = 0.0;
                for col in i + 1..q - 1 {
                    let (a, b) = (r[(i, col)], r[(i + 1, col)]);
                    r[(i, col)] = c * a + s * b;
                    r[(i + 1, col)] = -s * a + c * b;
                }
                rotate_columns(&mut j, i, i + 1, c, s);
            }
        }
    }

    let mut eq_duals = DVector::zeros(m_eq);
    let mut in_duals = DVector::zeros(m_in);
    for (&k, &u) in active.iter().zip(&mult) {
        match kinds[k] {
            Kind::Equality { row } => eq_duals[row] = sign[k] * u,
            Kind::Inequality { row } => in_duals[row] = u.max(0.0),
        }
    }
    let objective = 0.5 * z.dot(&(problem.hessian * &z)) + problem.linear.dot(&z);
    Ok(QpSolution { z, eq_duals, in_duals, objective, iterations })
}
