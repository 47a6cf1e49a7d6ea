//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    ½·dᵀHd + cᵀd
//! subject to  A_eq·d + b_eq  = 0
//!             A_in·d + b_in ≤ 0
//! ```
//!
//! with a primal active-set method. Each working-set subproblem is solved in
//! the null space of the working constraints. If the Hessian projected onto
//! the equality null space has an eigenvalue below `τ`, the whole Hessian is
//! shifted by `(τ − λ_min + 1e-8)·I` before solving; the applied shift is
//! reported in [`QpSolution::regularization`].

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    h: DMatrix<f64>,
    c: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; `h` is symmetrised.
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = c.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(invalid!(
                "hessian is {}x{}, gradient has {n} entries",
                h.nrows(),
                h.ncols()
            ));
        }
        if h.iter().chain(c.iter()).any(|x| !x.is_finite()) {
            return Err(invalid!("qp data must be finite"));
        }
        let h = (&h + h.transpose()) * 0.5;
        Ok(Self {
            h,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        })
    }

    /// Adds rows `a·d + b = 0`.
    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_rows(&a, &b, self.dim(), "equality")?;
        self.a_eq = a;
        self.b_eq = b;
        Ok(self)
    }

    /// Adds rows `a·d + b ≤ 0`.
    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_rows(&a, &b, self.dim(), "inequality")?;
        self.a_in = a;
        self.b_in = b;
        Ok(self)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn equalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a_eq, &self.b_eq)
    }

    pub fn inequalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a_in, &self.b_in)
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.h * d)) + self.c.dot(d)
    }

    /// Largest violation of any constraint at `d` (zero when feasible).
    pub fn max_violation(&self, d: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * d + &self.b_eq).amax();
        let ineq = (&self.a_in * d + &self.b_in)
            .iter()
            .fold(0.0_f64, |acc, &r| acc.max(r));
        eq.max(ineq)
    }
}

fn check_rows(a: &DMatrix<f64>, b: &DVector<f64>, n: usize, kind: &str) -> Result<()> {
    if a.ncols() != n || a.nrows() != b.len() {
        return Err(invalid!(
            "{kind} block is {}x{} with {} offsets, expected {n} columns",
            a.nrows(),
            a.ncols(),
            b.len()
        ));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(invalid!("{kind} data must be finite"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    pub max_iterations: usize,
    /// Minimum admissible eigenvalue of the projected Hessian.
    pub regularization_floor: f64,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    /// Feasible starting point; skips phase one when provided.
    pub start: Option<DVector<f64>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            regularization_floor: 1e-8,
            feasibility_tol: 1e-9,
            optimality_tol: 1e-11,
            start: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    /// The reduced Hessian could not be factorised even after regularisation.
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub d: DVector<f64>,
    pub duals_eq: DVector<f64>,
    pub duals_in: DVector<f64>,
    pub status: QpStatus,
    /// Max of stationarity, primal violation, complementarity and dual
    /// infeasibility, measured against the (possibly shifted) Hessian.
    pub kkt_residual: f64,
    /// Objective of the unshifted problem at `d`.
    pub objective: f64,
    /// Diagonal shift added to the Hessian, zero if none was needed.
    pub regularization: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Incrementally built orthonormal basis (modified Gram-Schmidt with one
/// reorthogonalisation pass).
struct OrthoBasis {
    vecs: Vec<DVector<f64>>,
}

impl OrthoBasis {
    fn new() -> Self {
        Self { vecs: Vec::new() }
    }

    fn try_push(&mut self, v: DVector<f64>) -> bool {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            return false;
        }
        let mut w = v;
        for _ in 0..2 {
            for q in &self.vecs {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let nw = w.norm();
        if nw <= 1e-10 * norm0 {
            return false;
        }
        w /= nw;
        self.vecs.push(w);
        true
    }

    /// Completes the basis to the whole space and returns the new columns.
    fn complement(mut self, n: usize) -> DMatrix<f64> {
        let start = self.vecs.len();
        for j in 0..n {
            if self.vecs.len() == n {
                break;
            }
            self.try_push(DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 }));
        }
        let cols = &self.vecs[start..];
        DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i])
    }
}

fn row(a: &DMatrix<f64>, i: usize) -> DVector<f64> {
    a.row(i).transpose()
}

/// Indices of a maximal linearly independent subset of the rows of `a`.
fn independent_rows(a: &DMatrix<f64>) -> (Vec<usize>, OrthoBasis) {
    let mut basis = OrthoBasis::new();
    let rows = (0..a.nrows())
        .filter(|&i| basis.try_push(row(a, i)))
        .collect();
    (rows, basis)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &x| acc.min(x))
}

struct Constraints<'a> {
    a_eq: &'a DMatrix<f64>,
    b_eq: &'a DVector<f64>,
    a_in: &'a DMatrix<f64>,
    b_in: &'a DVector<f64>,
}

struct ActiveSetOutcome {
    x: DVector<f64>,
    duals_eq: DVector<f64>,
    duals_in: DVector<f64>,
    status: QpStatus,
    iterations: usize,
}

/// Primal active-set iterations from a feasible `x0`.
fn active_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    cons: &Constraints<'_>,
    x0: DVector<f64>,
    opts: &QpOptions,
) -> ActiveSetOutcome {
    let n = c.len();
    let m_in = cons.a_in.nrows();
    let (eq_rows, _) = independent_rows(cons.a_eq);
    let in_rows: Vec<DVector<f64>> = (0..m_in).map(|i| row(cons.a_in, i)).collect();

    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    {
        let mut basis = OrthoBasis::new();
        for &i in &eq_rows {
            basis.try_push(row(cons.a_eq, i));
        }
        for (i, a) in in_rows.iter().enumerate() {
            let r = a.dot(&x) + cons.b_in[i];
            let tol = opts.feasibility_tol * (1.0 + cons.b_in[i].abs());
            if r.abs() <= tol && basis.try_push(a.clone()) {
                working.push(i);
            }
        }
    }

    let mut duals_eq = DVector::zeros(cons.a_eq.nrows());
    let mut duals_in = DVector::zeros(m_in);
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    // Set after an unblocked step: x then minimises over the working set,
    // whatever roundoff says about the next step.
    let mut settled = false;

    while iterations < opts.max_iterations {
        iterations += 1;
        let k = eq_rows.len() + working.len();
        let mut a_w = DMatrix::zeros(k, n);
        for (r, &i) in eq_rows.iter().enumerate() {
            a_w.row_mut(r).copy_from(&cons.a_eq.row(i));
        }
        for (r, &i) in working.iter().enumerate() {
            a_w.row_mut(eq_rows.len() + r).copy_from(&cons.a_in.row(i));
        }
        let mut basis = OrthoBasis::new();
        for r in 0..k {
            basis.try_push(row(&a_w, r));
        }
        let z = basis.complement(n);
        let g = h * &x + c;

        let p = if settled {
            DVector::zeros(n)
        } else if z.ncols() > 0 {
            let hz = z.transpose() * h * &z;
            let rhs = -(z.transpose() * &g);
            let Some(chol) = hz.cholesky() else {
                status = QpStatus::Singular;
                break;
            };
            &z * chol.solve(&rhs)
        } else {
            DVector::zeros(n)
        };

        let x_scale = 1.0 + x.amax();
        if p.amax() <= 1e-13 * x_scale {
            // Stationary on the working set: check multiplier signs.
            let lambda = if k > 0 {
                let gram = &a_w * a_w.transpose();
                let rhs = -(&a_w * &g);
                match gram.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
                }
            } else {
                DVector::zeros(0)
            };
            let dual_tol = opts.optimality_tol * (1.0 + g.amax());
            let mut worst: Option<(usize, f64)> = None;
            for (r, &i) in working.iter().enumerate() {
                let l = lambda[eq_rows.len() + r];
                if l < -dual_tol && worst.is_none_or(|(_, wl)| l < wl) {
                    worst = Some((i, l));
                }
            }
            match worst {
                Some((i, _)) => {
                    working.retain(|&w| w != i);
                    settled = false;
                }
                None => {
                    for (r, &i) in eq_rows.iter().enumerate() {
                        duals_eq[i] = lambda[r];
                    }
                    for (r, &i) in working.iter().enumerate() {
                        duals_in[i] = lambda[eq_rows.len() + r].max(0.0);
                    }
                    status = QpStatus::Optimal;
                    break;
                }
            }
            continue;
        }

        let p_norm = p.norm();
        let mut step = 1.0;
        let mut blocking = None;
        for (i, a) in in_rows.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = a.dot(&p);
            if ap <= 1e-14 * a.norm() * p_norm {
                continue;
            }
            let slack = -(a.dot(&x) + cons.b_in[i]);
            let t = slack.max(0.0) / ap;
            if t < step {
                step = t;
                blocking = Some(i);
            }
        }
        x.axpy(step, &p, 1.0);
        match blocking {
            Some(i) => working.push(i),
            None => settled = true,
        }
    }

    ActiveSetOutcome {
        x,
        duals_eq,
        duals_in,
        status,
        iterations,
    }
}

/// Minimum-norm solution of the equality block, if consistent.
fn equality_start(cons: &Constraints<'_>, n: usize, tol: f64) -> Option<DVector<f64>> {
    if cons.a_eq.nrows() == 0 {
        return Some(DVector::zeros(n));
    }
    let pinv = cons.a_eq.clone().pseudo_inverse(1e-12).ok()?;
    let x = -(pinv * cons.b_eq);
    let resid = (cons.a_eq * &x + cons.b_eq).amax();
    (resid <= tol * (1.0 + cons.b_eq.amax())).then_some(x)
}

fn worst_inequality(cons: &Constraints<'_>, x: &DVector<f64>, tol: f64) -> f64 {
    (0..cons.a_in.nrows())
        .map(|i| {
            let r = cons.a_in.row(i).dot(&x.transpose()) + cons.b_in[i];
            r - tol * (1.0 + cons.b_in[i].abs())
        })
        .fold(0.0_f64, f64::max)
}

/// Elastic phase one: minimise `s + ε/2·(‖x − x0‖² + s²)` subject to the
/// equalities and `A_in·x + b_in ≤ s`, `s ≥ 0`.
fn phase_one(cons: &Constraints<'_>, x0: &DVector<f64>, opts: &QpOptions) -> Option<DVector<f64>> {
    let n = x0.len();
    let (m_eq, m_in) = (cons.a_eq.nrows(), cons.a_in.nrows());
    let eps = 1e-9;
    let h = DMatrix::identity(n + 1, n + 1) * eps;
    let mut c = DVector::zeros(n + 1);
    c.rows_mut(0, n).copy_from(&(-x0 * eps));
    c[n] = 1.0;
    let mut a_eq = DMatrix::zeros(m_eq, n + 1);
    a_eq.view_mut((0, 0), (m_eq, n)).copy_from(cons.a_eq);
    let mut a_in = DMatrix::zeros(m_in + 1, n + 1);
    a_in.view_mut((0, 0), (m_in, n)).copy_from(cons.a_in);
    for i in 0..m_in {
        a_in[(i, n)] = -1.0;
    }
    a_in[(m_in, n)] = -1.0;
    let mut b_in = DVector::zeros(m_in + 1);
    b_in.rows_mut(0, m_in).copy_from(cons.b_in);
    let s0 = (0..m_in)
        .map(|i| cons.a_in.row(i).dot(&x0.transpose()) + cons.b_in[i])
        .fold(0.0_f64, f64::max);
    let mut y0 = DVector::zeros(n + 1);
    y0.rows_mut(0, n).copy_from(x0);
    y0[n] = s0;
    let aux = Constraints {
        a_eq: &a_eq,
        b_eq: cons.b_eq,
        a_in: &a_in,
        b_in: &b_in,
    };
    let out = active_set(&h, &c, &aux, y0, opts);
    let s = out.x[n];
    let limit = opts.feasibility_tol * (1.0 + cons.b_in.amax());
    (out.status == QpStatus::Optimal && s <= limit).then(|| out.x.rows(0, n).into_owned())
}

/// Solves a convex QP; see the module docs for the problem form.
pub fn solve_qp(problem: &QpProblem, options: &QpOptions) -> Result<QpSolution> {
    let n = problem.dim();
    let cons = Constraints {
        a_eq: &problem.a_eq,
        b_eq: &problem.b_eq,
        a_in: &problem.a_in,
        b_in: &problem.b_in,
    };

    // Curvature check on the equality null space.
    let (_, eq_basis) = independent_rows(&problem.a_eq);
    let z_eq = eq_basis.complement(n);
    let reduced = z_eq.transpose() * &problem.h * &z_eq;
    let lambda_min = min_eigenvalue(&reduced);
    let tau = options.regularization_floor;
    let shift = if lambda_min < tau {
        tau - lambda_min + 1e-8
    } else {
        0.0
    };
    let mut h = problem.h.clone();
    if shift > 0.0 {
        for i in 0..n {
            h[(i, i)] += shift;
        }
    }

    let infeasible = |x: DVector<f64>, iterations| {
        let objective = problem.objective(&x);
        let kkt_residual = problem.max_violation(&x);
        QpSolution {
            d: x,
            duals_eq: DVector::zeros(problem.a_eq.nrows()),
            duals_in: DVector::zeros(problem.a_in.nrows()),
            status: QpStatus::Infeasible,
            kkt_residual,
            objective,
            regularization: shift,
            iterations,
        }
    };

    let x0 = match &options.start {
        Some(s) => {
            if s.len() != n {
                return Err(invalid!(
                    "start point has {} entries, expected {n}",
                    s.len()
                ));
            }
            s.clone()
        }
        None => {
            let Some(x) = equality_start(&cons, n, options.feasibility_tol) else {
                return Ok(infeasible(DVector::zeros(n), 0));
            };
            if worst_inequality(&cons, &x, options.feasibility_tol) > 0.0 {
                match phase_one(&cons, &x, options) {
                    Some(y) => y,
                    None => return Ok(infeasible(x, 0)),
                }
            } else {
                x
            }
        }
    };

    let out = active_set(&h, &problem.c, &cons, x0, options);
    let d = out.x;
    let stationarity = (&h * &d
        + &problem.c
        + problem.a_eq.transpose() * &out.duals_eq
        + problem.a_in.transpose() * &out.duals_in)
        .amax();
    let slack = &problem.a_in * &d + &problem.b_in;
    let complementarity = slack
        .iter()
        .zip(out.duals_in.iter())
        .fold(0.0_f64, |acc, (s, mu)| acc.max((s * mu).abs()));
    let dual_infeasibility = out.duals_in.iter().fold(0.0_f64, |acc, &mu| acc.max(-mu));
    let kkt_residual = stationarity
        .max(problem.max_violation(&d))
        .max(complementarity)
        .max(dual_infeasibility);
    Ok(QpSolution {
        objective: problem.objective(&d),
        d,
        duals_eq: out.duals_eq,
        duals_in: out.duals_in,
        status: out.status,
        kkt_residual,
        regularization: shift,
        iterations: out.iterations,
    })
}
