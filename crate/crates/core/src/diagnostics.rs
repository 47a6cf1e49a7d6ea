use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Convergence record shared by the iterative solvers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Residual at the returned point (KKT residual for SQP, fixed-point
    /// residual for the fractional solver).
    pub residual: f64,
    pub objective_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    /// Largest constraint violation seen over all accepted iterates.
    pub max_violation: f64,
    pub note: Option<String>,
}

/// What one SQP iteration did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `‖d‖∞` in normalised coordinates.
    pub step_norm: f64,
    /// Accepted fraction of the QP step.
    pub step_length: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    /// KKT residual at the iterate the step started from.
    pub kkt_residual: f64,
    pub regularization: f64,
    pub qp_iterations: usize,
}
