//! Line-search SQP driver for smooth objectives under linear constraints.

use alloc::format;

use nalgebra::{DMatrix, DVector};

use crate::diagnostics::{SolverDiagnostics, StepDiagnostics};
use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;

/// `a_in·z + b_in ≤ 0`, `a_eq·z + b_eq = 0`.
pub(crate) struct Linear {
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl Linear {
    /// ℓ1 violation.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let ineq: f64 = (&self.a_in * z + &self.b_in)
            .iter()
            .map(|&r| r.max(0.0))
            .sum();
        let eq: f64 = (&self.a_eq * z + &self.b_eq).iter().map(|r| r.abs()).sum();
        ineq + eq
    }

    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let ineq = (&self.a_in * z + &self.b_in)
            .iter()
            .fold(0.0_f64, |a, &r| a.max(r));
        let eq = if self.b_eq.is_empty() {
            0.0
        } else {
            (&self.a_eq * z + &self.b_eq).amax()
        };
        ineq.max(eq)
    }
}

pub(crate) trait Smooth {
    fn linear(&self) -> &Linear;
    /// Objective in solver units.
    fn value(&self, z: &DVector<f64>) -> f64;
    /// Objective in model units, for traces.
    fn raw_value(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Positive definite model Hessian.
    fn model_hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    /// Sets the objective normalisation from a reference point.
    fn rescale(&mut self, z: &DVector<f64>);
    /// Alternative trial point tried after the line search.
    fn extrapolate(&self, _trial: &DVector<f64>, _d: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

pub(crate) struct QpStep {
    pub d: DVector<f64>,
    pub duals_in: DVector<f64>,
    pub duals_eq: DVector<f64>,
    pub kkt_residual: f64,
    pub regularization: f64,
    pub qp_iterations: usize,
}

pub(crate) fn qp_step<P: Smooth>(prob: &P, z: &DVector<f64>, opts: &QpOptions) -> Result<QpStep> {
    let lin = prob.linear();
    let g = prob.gradient(z);
    let h = prob.model_hessian(z);
    let c_in = &lin.a_in * z + &lin.b_in;
    let c_eq = &lin.a_eq * z + &lin.b_eq;
    let qp = QpProblem::new(h, g.clone())?
        .with_equalities(lin.a_eq.clone(), c_eq.clone())?
        .with_inequalities(lin.a_in.clone(), c_in.clone())?;
    let mut qp_opts = opts.clone();
    let violation = lin.max_violation(z);
    if violation <= qp_opts.feasibility_tol {
        qp_opts.start = Some(DVector::zeros(z.len()));
    }
    let sol = solve_qp(&qp, &qp_opts)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver(format!(
            "sqp subproblem ended with status {:?} after {} iterations",
            sol.status, sol.iterations
        )));
    }
    let stationarity =
        (&g + lin.a_in.transpose() * &sol.duals_in + lin.a_eq.transpose() * &sol.duals_eq).amax();
    let complementarity = c_in
        .iter()
        .zip(sol.duals_in.iter())
        .fold(0.0_f64, |acc, (c, mu)| acc.max((c * mu).abs()));
    Ok(QpStep {
        d: sol.d,
        duals_in: sol.duals_in,
        duals_eq: sol.duals_eq,
        kkt_residual: stationarity.max(complementarity).max(violation),
        regularization: sol.regularization,
        qp_iterations: sol.iterations,
    })
}

pub(crate) fn take_step<P: Smooth>(
    prob: &P,
    z: &DVector<f64>,
    step: &QpStep,
    full_step: bool,
) -> (DVector<f64>, StepDiagnostics) {
    let lin = prob.linear();
    let duals_max = step.duals_in.amax().max(step.duals_eq.amax());
    let rho = 10.0 * duals_max + 1.0;
    let merit = |x: &DVector<f64>| prob.value(x) + rho * lin.violation(x);
    let merit0 = merit(z);
    let slope = prob.gradient(z).dot(&step.d) - rho * lin.violation(z);
    let mut t = 1.0;
    let mut trial = z + &step.d;
    let mut merit1 = merit(&trial);
    if !full_step {
        while merit1 > merit0 + ARMIJO * t * slope.min(0.0) && t > MIN_STEP {
            t *= 0.5;
            trial = z + &step.d * t;
            merit1 = merit(&trial);
        }
        if merit1 > merit0 {
            trial = z.clone();
            merit1 = merit0;
            t = 0.0;
        }
        if t > 0.0 {
            if let Some(alt) = prob.extrapolate(&trial, &step.d) {
                let m = merit(&alt);
                if m < merit1 {
                    trial = alt;
                    merit1 = m;
                }
            }
        }
    }
    let diag = StepDiagnostics {
        step_norm: step.d.amax(),
        step_length: t,
        merit_before: merit0,
        merit_after: merit1,
        kkt_residual: step.kkt_residual,
        regularization: step.regularization,
        qp_iterations: step.qp_iterations,
    };
    (trial, diag)
}

pub(crate) struct RunOptions<'a> {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub full_step: bool,
    pub qp: &'a QpOptions,
}

pub(crate) struct RunOutcome {
    pub z: DVector<f64>,
    pub last_step: Option<QpStep>,
    pub diagnostics: SolverDiagnostics,
}

/// Iterates from a feasible `z` until the KKT residual drops below the
/// tolerance, the iteration budget runs out or the line search stalls.
pub(crate) fn run<P: Smooth>(
    prob: &mut P,
    mut z: DVector<f64>,
    opts: RunOptions<'_>,
) -> Result<RunOutcome> {
    prob.rescale(&z);
    let mut diag = SolverDiagnostics {
        max_violation: prob.linear().max_violation(&z),
        ..Default::default()
    };
    diag.objective_trace.push(prob.raw_value(&z));
    let mut last = None;
    for it in 0..opts.max_iterations {
        let step = qp_step(prob, &z, opts.qp)?;
        diag.residual_trace.push(step.kkt_residual);
        diag.residual = step.kkt_residual;
        diag.iterations = it;
        if step.kkt_residual <= opts.tolerance {
            diag.converged = true;
            last = Some(step);
            break;
        }
        let (next, sd) = take_step(prob, &z, &step, opts.full_step);
        last = Some(step);
        if sd.step_length == 0.0 {
            diag.note = Some("line search stalled".into());
            break;
        }
        let moved = (&next - &z).amax();
        z = next;
        diag.iterations = it + 1;
        diag.max_violation = diag.max_violation.max(prob.linear().max_violation(&z));
        diag.objective_trace.push(prob.raw_value(&z));
        if moved <= 1e-15 * (1.0 + z.amax()) {
            diag.note = Some("iterate stopped moving above tolerance".into());
            break;
        }
    }
    Ok(RunOutcome {
        z,
        last_step: last,
        diagnostics: diag,
    })
}
