//! Transmit power and bandwidth for fixed layer splits and GPU clocks.
//!
//! The uplink energy `p·d/R(p, b)` is a sum of ratios. Each ratio is moved
//! into the constraints through an epigraph variable `β_n`, and the ratio
//! constraints are then weighted by multipliers `ν_n`. For fixed `(β, ν)` the
//! problem `min Σ ν_n (p_n d_n − β_n R_n)` is convex, because the rate is
//! jointly concave in power and bandwidth. The outer loop updates
//! `β_n = p_n d_n / R_n` and `ν_n = ω_e / R_n` until they stop moving.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::SolverDiagnostics;
use crate::error::{invalid, Error, Result};
use crate::model::{rate_unchecked, Weights};
use crate::nlp::{self, Linear, RunOptions, Smooth};
use crate::qp::QpOptions;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct FracOptions {
    pub max_outer: usize,
    /// Relative fixed-point residual at which the outer loop stops.
    pub outer_tolerance: f64,
    /// Weight of the fresh `(β, ν)` in the outer update, in `(0, 1]`.
    pub damping: f64,
    pub max_inner: usize,
    pub inner_tolerance: f64,
    /// Lowest transmit power, W. Uplink energy falls monotonically as power
    /// drops, so without a floor the optimum degenerates to a silent link.
    pub power_floor: f64,
    /// Lowest bandwidth share, Hz.
    pub bandwidth_floor: f64,
    pub update: OuterUpdate,
    pub full_step: bool,
    pub qp: QpOptions,
}

/// How the outer loop moves `(β, ν)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterUpdate {
    /// `β ← p d / R`, `ν ← ω_e / R`, blended by `damping`.
    FixedPoint,
    /// Newton step on the fixed-point equations, differentiating the inner
    /// bandwidth split through its optimality conditions.
    #[default]
    Newton,
}

impl Default for FracOptions {
    fn default() -> Self {
        Self {
            max_outer: 50,
            outer_tolerance: 1e-8,
            damping: 1.0,
            max_inner: 300,
            inner_tolerance: 1e-8,
            power_floor: 1e-3,
            bandwidth_floor: 1e3,
            update: OuterUpdate::default(),
            full_step: false,
            qp: QpOptions::default(),
        }
    }
}

impl FracOptions {
    fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.power_floor >= 0.0 && self.bandwidth_floor > 0.0) {
            return Err(invalid!("power floor must be >= 0 and bandwidth floor > 0"));
        }
        Ok(())
    }
}

/// Outer-loop iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FracState {
    pub power: Vec<f64>,
    pub bandwidth: Vec<f64>,
    /// Epigraph levels, J.
    pub beta: Vec<f64>,
    pub nu: Vec<f64>,
    pub outer_iteration: usize,
    pub residual_norm: f64,
}

fn check_link(p: f64, b: f64, g: f64, noise: f64) -> Result<()> {
    if !(p.is_finite() && p > 0.0 && b.is_finite() && b > 0.0) {
        return Err(invalid!("power and bandwidth must be > 0 (got {p}, {b})"));
    }
    if !(g.is_finite() && g > 0.0 && noise.is_finite() && noise > 0.0) {
        return Err(invalid!("gain and noise must be > 0"));
    }
    Ok(())
}

/// `log1p(x) − x/(1+x)`, accurate for small `x`.
fn bandwidth_term(x: f64) -> f64 {
    if x < 1e-3 {
        let mut sum = 0.0;
        let mut pow = x;
        for k in 2..10 {
            pow *= -x;
            let kf = f64::from(k);
            sum -= pow * (kf - 1.0) / kf;
        }
        sum
    } else {
        libm::log1p(x) - x / (1.0 + x)
    }
}

fn gradient_unchecked(p: f64, b: f64, g: f64, noise: f64) -> [f64; 2] {
    let x = g * p / (noise * b);
    [g / (noise * LN_2 * (1.0 + x)), bandwidth_term(x) / LN_2]
}

fn hessian_unchecked(p: f64, b: f64, g: f64, noise: f64) -> [[f64; 2]; 2] {
    let s = noise * b + g * p;
    let c = g * g / (LN_2 * s * s);
    [[-c * b, c * p], [c * p, -c * p * p / b]]
}

/// `(∂R/∂p, ∂R/∂b)` of the link rate.
pub fn rate_gradient(power: f64, bandwidth: f64, gain: f64, noise_psd: f64) -> Result<[f64; 2]> {
    check_link(power, bandwidth, gain, noise_psd)?;
    Ok(gradient_unchecked(power, bandwidth, gain, noise_psd))
}

/// Hessian of the link rate over `(p, b)`.
pub fn rate_hessian(
    power: f64,
    bandwidth: f64,
    gain: f64,
    noise_psd: f64,
) -> Result<[[f64; 2]; 2]> {
    check_link(power, bandwidth, gain, noise_psd)?;
    Ok(hessian_unchecked(power, bandwidth, gain, noise_psd))
}

/// `xᵀ ∇²R x` for the association-weighted rate `R = Σ_m χ_m r_m`, in the
/// closed form `−Σ χ g² (b x₁ − p x₂)² / (ln2 · b · (bσ² + gp)²)`.
pub fn rate_quadratic_form(
    power: f64,
    bandwidth: f64,
    gains: &[f64],
    chi: &[f64],
    noise_psd: f64,
    x: [f64; 2],
) -> Result<f64> {
    if gains.len() != chi.len() {
        return Err(invalid!("gains and association weights differ in length"));
    }
    let mut total = 0.0;
    for (&g, &c) in gains.iter().zip(chi) {
        check_link(power, bandwidth, g, noise_psd)?;
        if !(c.is_finite() && c >= 0.0) {
            return Err(invalid!("association weights must be >= 0"));
        }
        let s = bandwidth * noise_psd + g * power;
        let t = bandwidth * x[0] - power * x[1];
        total -= c * g * g * t * t / (LN_2 * bandwidth * s * s);
    }
    Ok(total)
}

/// Weighted uplink energy `Σ ω_e p d / R`.
pub fn comm_objective(
    scenario: &Scenario,
    weights: Weights,
    power: &[f64],
    bandwidth: &[f64],
) -> Result<f64> {
    check_dims(scenario, power, bandwidth)?;
    let mut total = 0.0;
    for i in 0..scenario.vehicle_count() {
        let rate = scenario.uplink_rate(i, power[i], bandwidth[i])?;
        total += crate::model::comm_energy(power[i], scenario.vehicles[i].payload_bits, rate)?;
    }
    Ok(weights.energy() * total)
}

fn check_dims(scenario: &Scenario, a: &[f64], b: &[f64]) -> Result<()> {
    let n = scenario.vehicle_count();
    if a.len() != n || b.len() != n {
        return Err(invalid!(
            "expected {n} entries, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    Ok(())
}

/// Recomputes `β_n = p_n d_n / R_n` and `ν_n = ω_e / R_n`, blended with
/// `previous` as `ξ·new + (1−ξ)·old` when given.
pub fn update_parameters(
    power: &[f64],
    bandwidth: &[f64],
    scenario: &Scenario,
    weights: Weights,
    previous: Option<(&[f64], &[f64])>,
    damping: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(scenario, power, bandwidth)?;
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(invalid!("damping must lie in (0, 1], got {damping}"));
    }
    let n = scenario.vehicle_count();
    let mut beta = Vec::with_capacity(n);
    let mut nu = Vec::with_capacity(n);
    for i in 0..n {
        let rate = scenario.uplink_rate(i, power[i], bandwidth[i])?;
        if rate <= 0.0 {
            return Err(Error::InfeasibleLink(alloc::format!(
                "vehicle {i}: zero uplink rate"
            )));
        }
        beta.push(power[i] * scenario.vehicles[i].payload_bits / rate);
        nu.push(weights.energy() / rate);
    }
    if let Some((old_beta, old_nu)) = previous {
        check_dims(scenario, old_beta, old_nu)?;
        for i in 0..n {
            beta[i] = damping * beta[i] + (1.0 - damping) * old_beta[i];
            nu[i] = damping * nu[i] + (1.0 - damping) * old_nu[i];
        }
    }
    Ok((beta, nu))
}

/// Per-vehicle link data for the inner problem.
#[derive(Debug, Clone, Copy)]
struct Link {
    payload: f64,
    gain: f64,
    p_max: f64,
    b_max: f64,
}

/// `min Σ ν (p d − β R)` in coordinates `(p/p_max, b/b_max)`.
struct Inner {
    links: Vec<Link>,
    noise: f64,
    nu: Vec<f64>,
    beta: Vec<f64>,
    groups: Vec<Vec<usize>>,
    p_floor: Vec<f64>,
    b_floor: Vec<f64>,
    scale: f64,
    lin: Linear,
}

impl Inner {
    /// Problem over the vehicles in `members`; `nu` and `beta` are indexed
    /// like `members`.
    fn new(
        scenario: &Scenario,
        members: &[usize],
        nu: &[f64],
        beta: &[f64],
        options: &FracOptions,
    ) -> Result<Self> {
        let n = members.len();
        let links: Vec<Link> = members
            .iter()
            .map(|&i| Link {
                payload: scenario.vehicles[i].payload_bits,
                gain: scenario.serving_gain(i),
                p_max: scenario.vehicles[i].hardware.p_max,
                b_max: scenario.rsus[scenario.association[i]].hardware.b_max,
            })
            .collect();
        let groups: Vec<Vec<usize>> = (0..scenario.rsu_count())
            .map(|m| {
                (0..n)
                    .filter(|&j| scenario.association[members[j]] == m)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        let p_floor: Vec<f64> = links
            .iter()
            .map(|l| options.power_floor / l.p_max)
            .collect();
        let b_floor: Vec<f64> = links
            .iter()
            .map(|l| options.bandwidth_floor / l.b_max)
            .collect();
        if p_floor.iter().any(|&f| f > 1.0) {
            return Err(invalid!("power floor exceeds a vehicle's p_max"));
        }
        for g in &groups {
            let need: f64 = g.iter().map(|&i| b_floor[i]).sum();
            if need > 1.0 {
                return Err(invalid!("bandwidth floors exceed an rsu's budget"));
            }
        }
        let mut a_in = DMatrix::zeros(3 * n, 2 * n);
        let mut b_in = DVector::zeros(3 * n);
        for i in 0..n {
            a_in[(i, i)] = 1.0;
            b_in[i] = -1.0;
            a_in[(n + i, i)] = -1.0;
            b_in[n + i] = p_floor[i];
            a_in[(2 * n + i, n + i)] = -1.0;
            b_in[2 * n + i] = b_floor[i];
        }
        let mut a_eq = DMatrix::zeros(groups.len(), 2 * n);
        for (k, g) in groups.iter().enumerate() {
            for &i in g {
                a_eq[(k, n + i)] = 1.0;
            }
        }
        let b_eq = DVector::from_element(groups.len(), -1.0);
        Ok(Self {
            links,
            noise: scenario.noise_psd(),
            nu: nu.to_vec(),
            beta: beta.to_vec(),
            groups,
            p_floor,
            b_floor,
            scale: 1.0,
            lin: Linear {
                a_in,
                b_in,
                a_eq,
                b_eq,
            },
        })
    }

    fn n(&self) -> usize {
        self.links.len()
    }

    fn pack(&self, power: &[f64], bandwidth: &[f64]) -> DVector<f64> {
        let n = self.n();
        let mut z = DVector::zeros(2 * n);
        for (i, l) in self.links.iter().enumerate() {
            z[i] = power[i] / l.p_max;
            z[n + i] = bandwidth[i] / l.b_max;
        }
        z
    }

    fn unpack(&self, z: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let p = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| z[i] * l.p_max)
            .collect();
        let b = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| z[n + i] * l.b_max)
            .collect();
        (p, b)
    }

    fn project(&self, z: &mut DVector<f64>) {
        let n = self.n();
        for i in 0..n {
            z[i] = z[i].clamp(self.p_floor[i], 1.0);
        }
        for g in &self.groups {
            let slack: f64 = 1.0 - g.iter().map(|&i| self.b_floor[i]).sum::<f64>();
            let excess: f64 = g
                .iter()
                .map(|&i| (z[n + i] - self.b_floor[i]).max(0.0))
                .sum();
            let k = g.len() as f64;
            for &i in g {
                let e = (z[n + i] - self.b_floor[i]).max(0.0);
                z[n + i] = self.b_floor[i]
                    + if excess > 0.0 {
                        e * slack / excess
                    } else {
                        slack / k
                    };
            }
        }
    }
}

impl Smooth for Inner {
    fn linear(&self) -> &Linear {
        &self.lin
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.raw_value(z) / self.scale
    }

    fn raw_value(&self, z: &DVector<f64>) -> f64 {
        let (p, b) = self.unpack(z);
        self.links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let r = rate_unchecked(p[i], b[i], l.gain, self.noise);
                self.nu[i] * (p[i] * l.payload - self.beta[i] * r)
            })
            .sum()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let (p, b) = self.unpack(z);
        let mut g = DVector::zeros(2 * n);
        for (i, l) in self.links.iter().enumerate() {
            let [rp, rb] = gradient_unchecked(p[i], b[i], l.gain, self.noise);
            g[i] = self.nu[i] * (l.payload - self.beta[i] * rp) * l.p_max;
            g[n + i] = -self.nu[i] * self.beta[i] * rb * l.b_max;
        }
        g / self.scale
    }

    fn model_hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let (p, b) = self.unpack(z);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for (i, l) in self.links.iter().enumerate() {
            let r = hessian_unchecked(p[i], b[i], l.gain, self.noise);
            let w = -self.nu[i] * self.beta[i] / self.scale;
            h[(i, i)] = w * r[0][0] * l.p_max * l.p_max;
            h[(i, n + i)] = w * r[0][1] * l.p_max * l.b_max;
            h[(n + i, i)] = h[(i, n + i)];
            h[(n + i, n + i)] = w * r[1][1] * l.b_max * l.b_max;
        }
        h
    }

    fn rescale(&mut self, z: &DVector<f64>) {
        let (p, b) = self.unpack(z);
        let s: f64 = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let r = rate_unchecked(p[i], b[i], l.gain, self.noise);
                self.nu[i] * (p[i] * l.payload + self.beta[i] * r)
            })
            .sum();
        self.scale = if s.is_finite() && s > 0.0 { s } else { 1.0 };
    }
}

/// Result of [`solve_inner`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    pub power: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub diagnostics: SolverDiagnostics,
}

/// Solves `min Σ ν_n (p_n d_n − β_n R_n)` over the power box and the
/// per-RSU bandwidth budgets.
pub fn solve_inner(
    nu: &[f64],
    beta: &[f64],
    scenario: &Scenario,
    start: Option<(&[f64], &[f64])>,
    options: &FracOptions,
) -> Result<InnerSolution> {
    scenario.validate()?;
    options.validate()?;
    check_dims(scenario, nu, beta)?;
    if nu.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(invalid!("nu must be > 0"));
    }
    if beta.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(invalid!("beta must be >= 0"));
    }
    let (p0, b0) = match start {
        Some((p, b)) => {
            check_dims(scenario, p, b)?;
            (p.to_vec(), b.to_vec())
        }
        None => default_start(scenario),
    };
    // RSUs only couple through their own budgets, so each is solved apart.
    let n = scenario.vehicle_count();
    let mut power = vec![0.0; n];
    let mut bandwidth = vec![0.0; n];
    let mut diag = SolverDiagnostics {
        converged: true,
        ..Default::default()
    };
    for m in 0..scenario.rsu_count() {
        let members = scenario.members(m);
        if members.is_empty() {
            continue;
        }
        let pick = |v: &[f64]| -> Vec<f64> { members.iter().map(|&i| v[i]).collect() };
        let mut prob = Inner::new(scenario, &members, &pick(nu), &pick(beta), options)?;
        let mut z = prob.pack(&pick(&p0), &pick(&b0));
        prob.project(&mut z);
        let out = nlp::run(
            &mut prob,
            z,
            RunOptions {
                max_iterations: options.max_inner,
                tolerance: options.inner_tolerance,
                full_step: options.full_step,
                qp: &options.qp,
            },
        )?;
        let (p, b) = prob.unpack(&out.z);
        for (j, &i) in members.iter().enumerate() {
            power[i] = p[j];
            bandwidth[i] = b[j];
        }
        let d = out.diagnostics;
        diag.iterations = diag.iterations.max(d.iterations);
        diag.converged &= d.converged;
        diag.residual = diag.residual.max(d.residual);
        diag.max_violation = diag.max_violation.max(d.max_violation);
        if diag.note.is_none() {
            diag.note = d.note;
        }
    }
    Ok(InnerSolution {
        power,
        bandwidth,
        diagnostics: diag,
    })
}

/// `p = p_max/2`, bandwidth split evenly per RSU.
pub fn default_start(scenario: &Scenario) -> (Vec<f64>, Vec<f64>) {
    let mut counts = vec![0usize; scenario.rsu_count()];
    for &m in &scenario.association {
        counts[m] += 1;
    }
    let power = scenario
        .vehicles
        .iter()
        .map(|v| v.hardware.p_max / 2.0)
        .collect();
    let bandwidth = scenario
        .association
        .iter()
        .map(|&m| scenario.rsus[m].hardware.b_max / counts[m] as f64)
        .collect();
    (power, bandwidth)
}

/// Largest relative fixed-point residuals `(|p d − β R| / (p d), |ν R − ω_e| / ω_e)`.
pub fn fixed_point_residuals(
    scenario: &Scenario,
    weights: Weights,
    state: &FracState,
) -> Result<(f64, f64)> {
    check_dims(scenario, &state.power, &state.bandwidth)?;
    check_dims(scenario, &state.beta, &state.nu)?;
    let mut epi = 0.0_f64;
    let mut mult = 0.0_f64;
    for i in 0..scenario.vehicle_count() {
        let rate = scenario.uplink_rate(i, state.power[i], state.bandwidth[i])?;
        let pd = state.power[i] * scenario.vehicles[i].payload_bits;
        epi = epi.max((pd - state.beta[i] * rate).abs() / pd.max(f64::MIN_POSITIVE));
        mult = mult.max((state.nu[i] * rate - weights.energy()).abs() / weights.energy());
    }
    Ok((epi, mult))
}

/// Result of [`solve_subproblem2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sp2Solution {
    /// Returned point, with the `(β, ν)` its last inner solve used.
    pub state: FracState,
    /// `Σ ω_e E^com` at the returned point.
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
    /// Iterations of each inner solve.
    pub inner_iterations: Vec<usize>,
}

/// Solves the power / bandwidth sub-problem by the two-layer parametric
/// scheme. The returned point is never worse than the (projected) start.
pub fn solve_subproblem2(
    scenario: &Scenario,
    weights: Weights,
    options: &FracOptions,
    start: Option<(&[f64], &[f64])>,
) -> Result<Sp2Solution> {
    scenario.validate()?;
    options.validate()?;
    let all: Vec<usize> = (0..scenario.vehicle_count()).collect();
    let probe = Inner::new(
        scenario,
        &all,
        &vec![1.0; all.len()],
        &vec![0.0; all.len()],
        options,
    )?;
    let (p0, b0) = match start {
        Some((p, b)) => {
            check_dims(scenario, p, b)?;
            (p.to_vec(), b.to_vec())
        }
        None => default_start(scenario),
    };
    let mut z0 = probe.pack(&p0, &b0);
    probe.project(&mut z0);
    let (power, bandwidth) = probe.unpack(&z0);

    if weights.energy() == 0.0 {
        let state = FracState {
            power,
            bandwidth,
            beta: vec![0.0; scenario.vehicle_count()],
            nu: vec![0.0; scenario.vehicle_count()],
            outer_iteration: 0,
            residual_norm: 0.0,
        };
        return Ok(Sp2Solution {
            state,
            objective: 0.0,
            diagnostics: SolverDiagnostics {
                converged: true,
                objective_trace: vec![0.0],
                note: Some("energy weight is zero; any feasible point is optimal".into()),
                ..Default::default()
            },
            inner_iterations: Vec::new(),
        });
    }

    let mut diag = SolverDiagnostics::default();
    let start_objective = comm_objective(scenario, weights, &power, &bandwidth)?;
    diag.objective_trace.push(start_objective);
    let outcome = match options.update {
        OuterUpdate::FixedPoint => {
            fixed_point_loop(scenario, weights, options, power, bandwidth, &mut diag)?
        }
        OuterUpdate::Newton => {
            safeguarded_loop(scenario, weights, options, power, bandwidth, &mut diag)?
        }
    };
    let (mut state, mut objective, inner_iterations) = outcome;
    if objective > start_objective {
        // Only reachable on unconverged runs.
        let (p, b) = probe.unpack(&z0);
        let (beta, nu) = update_parameters(&p, &b, scenario, weights, None, 1.0)?;
        state = FracState {
            power: p,
            bandwidth: b,
            beta,
            nu,
            outer_iteration: 0,
            residual_norm: f64::INFINITY,
        };
        objective = start_objective;
        diag.note = Some("no outer iterate improved on the start".into());
    }
    Ok(Sp2Solution {
        state,
        objective,
        diagnostics: diag,
        inner_iterations,
    })
}

type LoopOutcome = (FracState, f64, Vec<usize>);

fn residual_of(scenario: &Scenario, weights: Weights, state: &FracState) -> Result<f64> {
    let (epi, mult) = fixed_point_residuals(scenario, weights, state)?;
    Ok(epi.max(mult))
}

/// Plain parametric iteration: inner solve, then `(β, ν)` from the result.
fn fixed_point_loop(
    scenario: &Scenario,
    weights: Weights,
    options: &FracOptions,
    mut power: Vec<f64>,
    mut bandwidth: Vec<f64>,
    diag: &mut SolverDiagnostics,
) -> Result<LoopOutcome> {
    let (mut beta, mut nu) = update_parameters(&power, &bandwidth, scenario, weights, None, 1.0)?;
    let mut best: Option<(FracState, f64)> = None;
    let mut inner_iterations = Vec::new();
    for k in 0..options.max_outer {
        let inner = solve_inner(&nu, &beta, scenario, Some((&power, &bandwidth)), options)?;
        inner_iterations.push(inner.diagnostics.iterations);
        diag.max_violation = diag.max_violation.max(inner.diagnostics.max_violation);
        power = inner.power;
        bandwidth = inner.bandwidth;
        let mut state = FracState {
            power: power.clone(),
            bandwidth: bandwidth.clone(),
            beta: beta.clone(),
            nu: nu.clone(),
            outer_iteration: k + 1,
            residual_norm: 0.0,
        };
        state.residual_norm = residual_of(scenario, weights, &state)?;
        let objective = comm_objective(scenario, weights, &power, &bandwidth)?;
        diag.objective_trace.push(objective);
        diag.residual_trace.push(state.residual_norm);
        diag.iterations = k + 1;
        diag.residual = state.residual_norm;
        let converged = state.residual_norm <= options.outer_tolerance;
        if best.as_ref().is_none_or(|(_, f)| objective <= *f) {
            best = Some((state, objective));
        }
        if converged {
            diag.converged = true;
            break;
        }
        let (b_next, n_next) = update_parameters(
            &power,
            &bandwidth,
            scenario,
            weights,
            Some((&beta, &nu)),
            options.damping,
        )?;
        beta = b_next;
        nu = n_next;
    }
    let (state, objective) = best.ok_or_else(|| invalid!("max_outer must be >= 1"))?;
    Ok((state, objective, inner_iterations))
}

/// Parametric iteration with a descent safeguard. From the current point
/// `y`, the inner problem with `(β, ν)` taken at `y` shares the gradient of
/// the true objective, so its solution `y'` gives a descent direction. Each
/// outer step keeps the better of a line search along `y → y'` and the
/// inner solution at the Newton update of `(β, ν)`.
fn safeguarded_loop(
    scenario: &Scenario,
    weights: Weights,
    options: &FracOptions,
    mut power: Vec<f64>,
    mut bandwidth: Vec<f64>,
    diag: &mut SolverDiagnostics,
) -> Result<LoopOutcome> {
    let mut objective = comm_objective(scenario, weights, &power, &bandwidth)?;
    let mut inner_iterations = Vec::new();
    let mut last = None;
    for k in 0..options.max_outer {
        let (beta, nu) = update_parameters(&power, &bandwidth, scenario, weights, None, 1.0)?;
        let inner = solve_inner(&nu, &beta, scenario, Some((&power, &bandwidth)), options)?;
        inner_iterations.push(inner.diagnostics.iterations);
        diag.max_violation = diag.max_violation.max(inner.diagnostics.max_violation);
        let mut state = FracState {
            power: inner.power,
            bandwidth: inner.bandwidth,
            beta,
            nu,
            outer_iteration: k + 1,
            residual_norm: 0.0,
        };
        state.residual_norm = residual_of(scenario, weights, &state)?;
        let inner_objective = comm_objective(scenario, weights, &state.power, &state.bandwidth)?;
        diag.iterations = k + 1;
        diag.residual = state.residual_norm;
        diag.residual_trace.push(state.residual_norm);
        if state.residual_norm <= options.outer_tolerance {
            diag.converged = true;
            diag.objective_trace.push(inner_objective);
            return Ok((state, inner_objective, inner_iterations));
        }

        let slope = directional_slope(
            scenario,
            weights,
            &power,
            &bandwidth,
            &state.power,
            &state.bandwidth,
        )?;
        let mut next = (power.clone(), bandwidth.clone(), objective);
        if slope < 0.0 {
            next = segment_search(
                scenario,
                weights,
                (&power, &bandwidth),
                (&state.power, &state.bandwidth),
                objective,
                slope,
            )?;
        }
        let (b_newton, n_newton) = newton_parameters(
            scenario,
            weights,
            &state.power,
            &state.bandwidth,
            &state.beta,
            &state.nu,
            options,
        )?;
        if let Ok(newton) = solve_inner(
            &n_newton,
            &b_newton,
            scenario,
            Some((&state.power, &state.bandwidth)),
            options,
        ) {
            inner_iterations.push(newton.diagnostics.iterations);
            let f = comm_objective(scenario, weights, &newton.power, &newton.bandwidth)?;
            if f < next.2 {
                diag.max_violation = diag.max_violation.max(newton.diagnostics.max_violation);
                next = (newton.power, newton.bandwidth, f);
            }
        }
        (power, bandwidth, objective) = next;
        diag.objective_trace.push(objective);
        last = Some(state);
    }
    // Out of iterations: return the last accepted point with its parameters.
    let mut state = last.ok_or_else(|| invalid!("max_outer must be >= 1"))?;
    let (beta, nu) = update_parameters(&power, &bandwidth, scenario, weights, None, 1.0)?;
    state.power = power;
    state.bandwidth = bandwidth;
    state.beta = beta;
    state.nu = nu;
    Ok((state, objective, inner_iterations))
}

/// `∇(Σ ω_e E)·(y₁ − y₀)` at `y₀`.
fn directional_slope(
    scenario: &Scenario,
    weights: Weights,
    p0: &[f64],
    b0: &[f64],
    p1: &[f64],
    b1: &[f64],
) -> Result<f64> {
    let noise = scenario.noise_psd();
    let mut slope = 0.0;
    for i in 0..scenario.vehicle_count() {
        let g = scenario.serving_gain(i);
        check_link(p0[i], b0[i], g, noise)?;
        let d = scenario.vehicles[i].payload_bits;
        let rate = rate_unchecked(p0[i], b0[i], g, noise);
        let [rp, rb] = gradient_unchecked(p0[i], b0[i], g, noise);
        let e = p0[i] * d / rate;
        slope += (d - e * rp) / rate * (p1[i] - p0[i]) - e * rb / rate * (b1[i] - b0[i]);
    }
    Ok(weights.energy() * slope)
}

/// Armijo backtracking along `y₀ + t (y₁ − y₀)`, `t ≤ 1`, with quadratic
/// interpolation for the trial steps.
fn segment_search(
    scenario: &Scenario,
    weights: Weights,
    y0: (&[f64], &[f64]),
    y1: (&[f64], &[f64]),
    f0: f64,
    slope: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mix = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
    };
    let mut t = 1.0;
    for _ in 0..60 {
        let p = mix(y0.0, y1.0, t);
        let b = mix(y0.1, y1.1, t);
        let f = comm_objective(scenario, weights, &p, &b)?;
        if f <= f0 + 1e-4 * t * slope {
            return Ok((p, b, f));
        }
        let curvature = f - f0 - slope * t;
        let tq = if curvature > 0.0 {
            -slope * t * t / (2.0 * curvature)
        } else {
            0.5 * t
        };
        t = tq.clamp(0.1 * t, 0.5 * t);
    }
    Ok((y0.0.to_vec(), y0.1.to_vec(), f0))
}

/// Full Newton target for `(β, ν)`.
///
/// The inner bandwidth split depends on `w = ν β` only; with the power
/// held at its inner optimum, `w_n = ω_e p_n d_n / R_n²` at the fixed point
/// and `β_n / ν_n = p_n d_n / ω_e`. The Jacobian of `b(w)` follows from
/// `w_n ∂R/∂b = μ` on each RSU with free (off-floor) shares.
fn newton_parameters(
    scenario: &Scenario,
    weights: Weights,
    power: &[f64],
    bandwidth: &[f64],
    beta: &[f64],
    nu: &[f64],
    options: &FracOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = scenario.vehicle_count();
    let omega = weights.energy();
    let noise = scenario.noise_psd();
    let mut w_next = vec![0.0; n];
    for m in 0..scenario.rsu_count() {
        let group = scenario.members(m);
        if group.is_empty() {
            continue;
        }
        let b_max = scenario.rsus[m].hardware.b_max;
        let k = group.len();
        let mut resid = DVector::zeros(k);
        let mut sens = vec![0.0; k];
        let mut a = vec![0.0; k];
        let mut c = vec![0.0; k];
        let mut free = vec![false; k];
        for (r, &i) in group.iter().enumerate() {
            let g = scenario.serving_gain(i);
            let rate = rate_unchecked(power[i], bandwidth[i], g, noise);
            if rate.is_nan() || rate <= 0.0 {
                return Err(Error::InfeasibleLink(alloc::format!(
                    "vehicle {i}: zero uplink rate"
                )));
            }
            let big_k = omega * power[i] * scenario.vehicles[i].payload_bits;
            let w = nu[i] * beta[i];
            resid[r] = w - big_k / (rate * rate);
            let [_, rb] = gradient_unchecked(power[i], bandwidth[i], g, noise);
            let rbb = hessian_unchecked(power[i], bandwidth[i], g, noise)[1][1];
            sens[r] = 2.0 * big_k * rb / (rate * rate * rate);
            free[r] = bandwidth[i] - options.bandwidth_floor > 1e-9 * b_max && rbb < 0.0 && w > 0.0;
            if free[r] {
                a[r] = 1.0 / (w * rbb);
                c[r] = rb * a[r];
            }
        }
        let a_sum: f64 = a.iter().sum();
        let mut jac = DMatrix::identity(k, k);
        if a_sum != 0.0 {
            for r in (0..k).filter(|&r| free[r]) {
                for q in (0..k).filter(|&q| free[q]) {
                    let mut db = a[r] * c[q] / a_sum;
                    if r == q {
                        db -= c[r];
                    }
                    jac[(r, q)] += sens[r] * db;
                }
            }
        }
        let step = jac.lu().solve(&(-&resid));
        for (r, &i) in group.iter().enumerate() {
            let w = nu[i] * beta[i];
            let fixed = w - resid[r];
            let newton = step
                .as_ref()
                .map(|s| w + s[r])
                .filter(|v| v.is_finite() && *v > 0.0);
            w_next[i] = newton.unwrap_or(fixed);
        }
    }
    let mut beta_next = Vec::with_capacity(n);
    let mut nu_next = Vec::with_capacity(n);
    for i in 0..n {
        let pd = power[i] * scenario.vehicles[i].payload_bits;
        beta_next.push(libm::sqrt(w_next[i] * pd / omega));
        nu_next.push(libm::sqrt(w_next[i] * omega / pd));
    }
    Ok((beta_next, nu_next))
}
