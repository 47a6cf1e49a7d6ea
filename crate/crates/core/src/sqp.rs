//! Layer split and GPU frequencies for fixed transmit power and bandwidth.
//!
//! The integer split `α` is relaxed to `[1, Υ]` and the resulting smooth
//! problem is solved by sequential quadratic programming: at every iterate the
//! objective is replaced by its second-order model, the (already linear)
//! constraints are kept, and the QP step is globalised with a backtracking
//! line search on an ℓ1 merit function. The relaxed split is then rounded and
//! the frequencies re-optimised with `α` held fixed.
//!
//! Internally frequencies are normalised by their caps and the objective by
//! its value at the starting point, so the QP tolerances are unit-free. The
//! public derivative routines work in the original units.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::SolverDiagnostics;
pub use crate::diagnostics::StepDiagnostics;
use crate::error::{invalid, Result};
use crate::model::{Allocation, Weights};
use crate::nlp::{self, qp_step, take_step, Linear, QpStep, RunOptions, RunOutcome, Smooth};
use crate::qp::QpOptions;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// Take the raw QP step without a line search.
    pub full_step: bool,
    /// Frequencies are kept above this fraction of their cap.
    pub floor_fraction: f64,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            kkt_tolerance: 1e-6,
            full_step: false,
            floor_fraction: 1e-3,
            qp: QpOptions::default(),
        }
    }
}

/// Primal-dual iterate of the relaxed problem, in original units.
///
/// `lambda`/`mu` belong to `1 − α_n ≤ 0` and `α_n − Υ ≤ 0`, `gamma` to
/// `f_n − f_n^max ≤ 0`, and `sigma[m]` to RSU `m`'s clock budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpState {
    pub layers: Vec<f64>,
    pub vehicle_freq: Vec<f64>,
    pub rsu_freq: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub iteration: usize,
    pub kkt_residual: f64,
}

impl SqpState {
    /// `α = Υ/2`, `f = f_max/2`, RSU clocks split evenly, multipliers zero.
    pub fn initial(scenario: &Scenario) -> Self {
        let n = scenario.vehicle_count();
        let upsilon = f64::from(scenario.llm.layer_count);
        let occupancy = occupancy(scenario);
        Self {
            layers: vec![upsilon / 2.0; n],
            vehicle_freq: scenario
                .vehicles
                .iter()
                .map(|v| v.hardware.f_max / 2.0)
                .collect(),
            rsu_freq: (0..n)
                .map(|i| {
                    let m = scenario.association[i];
                    scenario.rsus[m].hardware.f_max / occupancy[m] as f64
                })
                .collect(),
            lambda: vec![0.0; n],
            mu: vec![0.0; n],
            gamma: vec![0.0; n],
            sigma: vec![0.0; scenario.rsu_count()],
            iteration: 0,
            kkt_residual: f64::INFINITY,
        }
    }

    fn check(&self, scenario: &Scenario) -> Result<()> {
        let n = scenario.vehicle_count();
        let lens = [
            self.layers.len(),
            self.vehicle_freq.len(),
            self.rsu_freq.len(),
            self.lambda.len(),
            self.mu.len(),
            self.gamma.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.sigma.len() != scenario.rsu_count() {
            return Err(invalid!("sqp state does not match the scenario dimensions"));
        }
        if self
            .vehicle_freq
            .iter()
            .chain(&self.rsu_freq)
            .any(|&f| !(f.is_finite() && f > 0.0))
        {
            return Err(invalid!("gpu frequencies must be > 0"));
        }
        if self.layers.iter().any(|a| !a.is_finite()) {
            return Err(invalid!("layer split must be finite"));
        }
        Ok(())
    }
}

fn occupancy(scenario: &Scenario) -> Vec<usize> {
    let mut counts = vec![0usize; scenario.rsu_count()];
    for &m in &scenario.association {
        counts[m] += 1;
    }
    counts
}

/// Per-vehicle constants: times are `coef / f`, energies `coef · f²`.
#[derive(Debug, Clone, Copy)]
struct Coeffs {
    local_time: f64,
    local_energy: f64,
    remote_time: f64,
    remote_energy: f64,
    f_max: f64,
    rsu_f_max: f64,
}

#[derive(Debug, Clone, Copy)]
struct CostWeights {
    time: f64,
    energy: f64,
}

impl CostWeights {
    #[inline]
    fn local(&self, c: &Coeffs, f: f64) -> f64 {
        self.time * c.local_time / f + self.energy * c.local_energy * f * f
    }
    #[inline]
    fn local_d1(&self, c: &Coeffs, f: f64) -> f64 {
        -self.time * c.local_time / (f * f) + 2.0 * self.energy * c.local_energy * f
    }
    #[inline]
    fn local_d2(&self, c: &Coeffs, f: f64) -> f64 {
        2.0 * self.time * c.local_time / (f * f * f) + 2.0 * self.energy * c.local_energy
    }
    #[inline]
    fn remote(&self, c: &Coeffs, f: f64) -> f64 {
        self.time * c.remote_time / f + self.energy * c.remote_energy * f * f
    }
    #[inline]
    fn remote_d1(&self, c: &Coeffs, f: f64) -> f64 {
        2.0 * self.energy * c.remote_energy * f - self.time * c.remote_time / (f * f)
    }
    #[inline]
    fn remote_d2(&self, c: &Coeffs, f: f64) -> f64 {
        2.0 * self.energy * c.remote_energy + 2.0 * self.time * c.remote_time / (f * f * f)
    }
}

fn coefficients(scenario: &Scenario) -> Result<Vec<Coeffs>> {
    (0..scenario.vehicle_count())
        .map(|i| {
            let psi = scenario.flops(i)?;
            let v = &scenario.vehicles[i].hardware;
            let r = &scenario.rsus[scenario.association[i]].hardware;
            Ok(Coeffs {
                local_time: psi / v.throughput_per_hz(),
                local_energy: v.kappa * psi / v.throughput_per_hz(),
                remote_time: psi / r.throughput_per_hz(),
                remote_energy: r.kappa * psi / r.throughput_per_hz(),
                f_max: v.f_max,
                rsu_f_max: r.f_max,
            })
        })
        .collect()
}

/// Sub-problem objective `F(α, f^V, f^R)`: compute delay and energy of the
/// local and offloaded layers. Uplink energy is not part of it.
pub fn eval_objective(state: &SqpState, scenario: &Scenario, weights: Weights) -> Result<f64> {
    state.check(scenario)?;
    let coeffs = coefficients(scenario)?;
    let w = cost_weights(weights);
    let upsilon = f64::from(scenario.llm.layer_count);
    Ok(objective_raw(
        &coeffs,
        w,
        upsilon,
        &state.layers,
        &state.vehicle_freq,
        &state.rsu_freq,
    ))
}

fn cost_weights(weights: Weights) -> CostWeights {
    CostWeights {
        time: weights.time(),
        energy: weights.energy(),
    }
}

fn objective_raw(
    coeffs: &[Coeffs],
    w: CostWeights,
    upsilon: f64,
    layers: &[f64],
    freq: &[f64],
    rsu_freq: &[f64],
) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            layers[i] * w.local(c, freq[i]) + (upsilon - layers[i]) * w.remote(c, rsu_freq[i])
        })
        .sum()
}

/// Index layout of the Lagrangian's variable vector
/// `(α, f^V, f^R, λ, μ, γ, σ)`: six blocks of `N` followed by `M` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagrangianLayout {
    pub vehicles: usize,
    pub rsus: usize,
}

impl LagrangianLayout {
    pub fn of(scenario: &Scenario) -> Self {
        Self {
            vehicles: scenario.vehicle_count(),
            rsus: scenario.rsu_count(),
        }
    }
    pub fn len(&self) -> usize {
        6 * self.vehicles + self.rsus
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn layers(&self, n: usize) -> usize {
        n
    }
    pub fn vehicle_freq(&self, n: usize) -> usize {
        self.vehicles + n
    }
    pub fn rsu_freq(&self, n: usize) -> usize {
        2 * self.vehicles + n
    }
    pub fn lambda(&self, n: usize) -> usize {
        3 * self.vehicles + n
    }
    pub fn mu(&self, n: usize) -> usize {
        4 * self.vehicles + n
    }
    pub fn gamma(&self, n: usize) -> usize {
        5 * self.vehicles + n
    }
    pub fn sigma(&self, m: usize) -> usize {
        6 * self.vehicles + m
    }
}

/// `L = F + Σλ(1−α) + Σμ(α−Υ) + Σγ(f−f^max) + Σσ_m(Σf^R − f_m^max)`.
pub fn eval_lagrangian(state: &SqpState, scenario: &Scenario, weights: Weights) -> Result<f64> {
    let mut l = eval_objective(state, scenario, weights)?;
    let upsilon = f64::from(scenario.llm.layer_count);
    let mut budget_use = vec![0.0; scenario.rsu_count()];
    for i in 0..scenario.vehicle_count() {
        let a = state.layers[i];
        l += state.lambda[i] * (1.0 - a) + state.mu[i] * (a - upsilon);
        l += state.gamma[i] * (state.vehicle_freq[i] - scenario.vehicles[i].hardware.f_max);
        budget_use[scenario.association[i]] += state.rsu_freq[i];
    }
    for (m, rsu) in scenario.rsus.iter().enumerate() {
        l += state.sigma[m] * (budget_use[m] - rsu.hardware.f_max);
    }
    Ok(l)
}

/// Gradient of the Lagrangian over `(α, f^V, f^R, λ, μ, γ, σ)`; see
/// [`LagrangianLayout`] for the ordering.
pub fn eval_gradient(
    state: &SqpState,
    scenario: &Scenario,
    weights: Weights,
) -> Result<DVector<f64>> {
    state.check(scenario)?;
    let coeffs = coefficients(scenario)?;
    let w = cost_weights(weights);
    let upsilon = f64::from(scenario.llm.layer_count);
    let lay = LagrangianLayout::of(scenario);
    let mut g = DVector::zeros(lay.len());
    let mut budget_use = vec![0.0; scenario.rsu_count()];
    for (i, c) in coeffs.iter().enumerate() {
        let (a, f, fr) = (state.layers[i], state.vehicle_freq[i], state.rsu_freq[i]);
        let m = scenario.association[i];
        g[lay.layers(i)] = w.local(c, f) - w.remote(c, fr) - state.lambda[i] + state.mu[i];
        g[lay.vehicle_freq(i)] = a * w.local_d1(c, f) + state.gamma[i];
        g[lay.rsu_freq(i)] = (upsilon - a) * w.remote_d1(c, fr) + state.sigma[m];
        g[lay.lambda(i)] = 1.0 - a;
        g[lay.mu(i)] = a - upsilon;
        g[lay.gamma(i)] = f - c.f_max;
        budget_use[m] += fr;
    }
    for (m, rsu) in scenario.rsus.iter().enumerate() {
        g[lay.sigma(m)] = budget_use[m] - rsu.hardware.f_max;
    }
    Ok(g)
}

/// Full symmetric Hessian of the Lagrangian over `(α, f^V, f^R, λ, μ, γ, σ)`.
/// Note `∂²L/∂α_n² = 0`: the model is linear in the split.
pub fn eval_hessian(
    state: &SqpState,
    scenario: &Scenario,
    weights: Weights,
) -> Result<DMatrix<f64>> {
    state.check(scenario)?;
    let coeffs = coefficients(scenario)?;
    let w = cost_weights(weights);
    let upsilon = f64::from(scenario.llm.layer_count);
    let lay = LagrangianLayout::of(scenario);
    let mut h = DMatrix::zeros(lay.len(), lay.len());
    let mut put = |r: usize, c: usize, v: f64| {
        h[(r, c)] = v;
        h[(c, r)] = v;
    };
    for (i, c) in coeffs.iter().enumerate() {
        let (a, f, fr) = (state.layers[i], state.vehicle_freq[i], state.rsu_freq[i]);
        put(lay.layers(i), lay.vehicle_freq(i), w.local_d1(c, f));
        put(lay.layers(i), lay.rsu_freq(i), -w.remote_d1(c, fr));
        put(lay.layers(i), lay.lambda(i), -1.0);
        put(lay.layers(i), lay.mu(i), 1.0);
        put(
            lay.vehicle_freq(i),
            lay.vehicle_freq(i),
            a * w.local_d2(c, f),
        );
        put(lay.vehicle_freq(i), lay.gamma(i), 1.0);
        put(
            lay.rsu_freq(i),
            lay.rsu_freq(i),
            (upsilon - a) * w.remote_d2(c, fr),
        );
        put(lay.rsu_freq(i), lay.sigma(scenario.association[i]), 1.0);
    }
    Ok(h)
}

/// The relaxed problem in normalised coordinates
/// `z = (α, f^V/f^V_max, f^R/f^R_max)`, or `(f^V/f^V_max, f^R/f^R_max)`
/// when the split is held fixed.
struct Relaxed {
    coeffs: Vec<Coeffs>,
    w: CostWeights,
    upsilon: f64,
    fixed_layers: Option<Vec<f64>>,
    /// Member lists of occupied RSUs, with the RSU index.
    groups: Vec<(usize, Vec<usize>)>,
    floor: f64,
    scale: f64,
    lin: Linear,
}

impl Relaxed {
    fn new(
        scenario: &Scenario,
        weights: Weights,
        fixed_layers: Option<Vec<f64>>,
        floor: f64,
    ) -> Result<Self> {
        let coeffs = coefficients(scenario)?;
        let n = coeffs.len();
        let groups: Vec<(usize, Vec<usize>)> = (0..scenario.rsu_count())
            .map(|m| (m, scenario.members(m)))
            .filter(|(_, members)| !members.is_empty())
            .collect();
        let joint = fixed_layers.is_none();
        let off = if joint { n } else { 0 };
        let dim = off + 2 * n;
        let rows = if joint { 5 * n } else { 3 * n };
        let mut a_in = DMatrix::zeros(rows, dim);
        let mut b_in = DVector::zeros(rows);
        let upsilon = f64::from(scenario.llm.layer_count);
        let mut r = 0;
        if joint {
            for i in 0..n {
                a_in[(r, i)] = -1.0;
                b_in[r] = 1.0;
                r += 1;
            }
            for i in 0..n {
                a_in[(r, i)] = 1.0;
                b_in[r] = -upsilon;
                r += 1;
            }
        }
        for i in 0..n {
            a_in[(r, off + i)] = 1.0;
            b_in[r] = -1.0;
            r += 1;
        }
        for i in 0..n {
            a_in[(r, off + i)] = -1.0;
            b_in[r] = floor;
            r += 1;
        }
        for i in 0..n {
            a_in[(r, off + n + i)] = -1.0;
            b_in[r] = floor;
            r += 1;
        }
        let mut a_eq = DMatrix::zeros(groups.len(), dim);
        let b_eq = DVector::from_element(groups.len(), -1.0);
        for (k, (_, members)) in groups.iter().enumerate() {
            for &i in members {
                a_eq[(k, off + n + i)] = 1.0;
            }
        }
        Ok(Self {
            coeffs,
            w: cost_weights(weights),
            upsilon,
            fixed_layers,
            groups,
            floor,
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
        self.coeffs.len()
    }

    fn joint(&self) -> bool {
        self.fixed_layers.is_none()
    }

    fn freq_offset(&self) -> usize {
        if self.joint() {
            self.n()
        } else {
            0
        }
    }

    fn pack(&self, layers: &[f64], freq: &[f64], rsu_freq: &[f64]) -> DVector<f64> {
        let n = self.n();
        let off = self.freq_offset();
        let mut z = DVector::zeros(off + 2 * n);
        for (i, c) in self.coeffs.iter().enumerate() {
            if self.joint() {
                z[i] = layers[i];
            }
            z[off + i] = freq[i] / c.f_max;
            z[off + n + i] = rsu_freq[i] / c.rsu_f_max;
        }
        z
    }

    fn unpack(&self, z: &DVector<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n();
        let off = self.freq_offset();
        let layers = match &self.fixed_layers {
            Some(l) => l.clone(),
            None => z.rows(0, n).iter().copied().collect(),
        };
        let freq = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| z[off + i] * c.f_max)
            .collect();
        let rsu = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| z[off + n + i] * c.rsu_f_max)
            .collect();
        (layers, freq, rsu)
    }

    fn raw_objective(&self, z: &DVector<f64>) -> f64 {
        let (a, f, fr) = self.unpack(z);
        objective_raw(&self.coeffs, self.w, self.upsilon, &a, &f, &fr)
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        self.raw_objective(z) / self.scale
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let off = self.freq_offset();
        let (a, f, fr) = self.unpack(z);
        let mut g = DVector::zeros(z.len());
        for (i, c) in self.coeffs.iter().enumerate() {
            if self.joint() {
                g[i] = self.w.local(c, f[i]) - self.w.remote(c, fr[i]);
            }
            g[off + i] = a[i] * self.w.local_d1(c, f[i]) * c.f_max;
            g[off + n + i] = (self.upsilon - a[i]) * self.w.remote_d1(c, fr[i]) * c.rsu_f_max;
        }
        g / self.scale
    }

    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let off = self.freq_offset();
        let (a, f, fr) = self.unpack(z);
        let mut h = DMatrix::zeros(z.len(), z.len());
        for (i, c) in self.coeffs.iter().enumerate() {
            if self.joint() {
                let af = self.w.local_d1(c, f[i]) * c.f_max;
                let ar = -self.w.remote_d1(c, fr[i]) * c.rsu_f_max;
                h[(i, off + i)] = af;
                h[(off + i, i)] = af;
                h[(i, off + n + i)] = ar;
                h[(off + n + i, i)] = ar;
            }
            h[(off + i, off + i)] = a[i] * self.w.local_d2(c, f[i]) * c.f_max * c.f_max;
            h[(off + n + i, off + n + i)] =
                (self.upsilon - a[i]) * self.w.remote_d2(c, fr[i]) * c.rsu_f_max * c.rsu_f_max;
        }
        h / self.scale
    }

    /// Makes the model Hessian positive definite. Each vehicle's `(α, u, v)`
    /// block has a zero `α` diagonal, which is lifted just above its
    /// Schur-complement bound; frequency curvatures are kept at least as large
    /// as their coupling to `α` so that bound is not huge when a split nears
    /// `Υ` and the remote curvature vanishes.
    fn convexify(&self, h: &mut DMatrix<f64>) {
        let n = self.n();
        let off = self.freq_offset();
        for i in 0..n {
            let (u, v) = (off + i, off + n + i);
            if self.joint() {
                let a = h[(i, u)];
                let b = h[(i, v)];
                h[(u, u)] = h[(u, u)].max(CURVATURE_FLOOR).max(a.abs());
                h[(v, v)] = h[(v, v)].max(CURVATURE_FLOOR).max(b.abs());
                h[(i, i)] = (1.0 + SCHUR_MARGIN) * (a * a / h[(u, u)] + b * b / h[(v, v)])
                    + CURVATURE_FLOOR;
            } else {
                h[(u, u)] = h[(u, u)].max(CURVATURE_FLOOR);
                h[(v, v)] = h[(v, v)].max(CURVATURE_FLOOR);
            }
        }
    }

    /// Pulls a start point inside the bounds and onto the budget equalities.
    fn project_start(&self, z: &mut DVector<f64>) {
        let n = self.n();
        let off = self.freq_offset();
        if self.joint() {
            for i in 0..n {
                z[i] = z[i].clamp(1.0, self.upsilon);
            }
        }
        for i in 0..n {
            z[off + i] = z[off + i].clamp(self.floor, 1.0);
        }
        for (_, members) in &self.groups {
            let idx = |i: usize| off + n + i;
            let k = members.len() as f64;
            // Rescale the slack above the floor so the shares sum to one.
            let excess: f64 = members
                .iter()
                .map(|&i| (z[idx(i)] - self.floor).max(0.0))
                .sum();
            let target = 1.0 - k * self.floor;
            for &i in members {
                let e = (z[idx(i)] - self.floor).max(0.0);
                z[idx(i)] = self.floor
                    + if excess > 0.0 {
                        e * target / excess
                    } else {
                        target / k
                    };
            }
        }
    }
}

const CURVATURE_FLOOR: f64 = 1e-10;
const SCHUR_MARGIN: f64 = 1e-4;
const SNAP_TOL: f64 = 1e-12;

impl Smooth for Relaxed {
    fn linear(&self) -> &Linear {
        &self.lin
    }
    fn value(&self, z: &DVector<f64>) -> f64 {
        self.objective(z)
    }
    fn raw_value(&self, z: &DVector<f64>) -> f64 {
        self.raw_objective(z)
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        Relaxed::gradient(self, z)
    }
    fn model_hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.hessian(z);
        self.convexify(&mut h);
        h
    }
    fn rescale(&mut self, z: &DVector<f64>) {
        self.scale = self.raw_objective(z).max(f64::MIN_POSITIVE);
    }
    /// The model is convexified along α, so splits creep towards their
    /// bounds; this finishes such moves in one go.
    fn extrapolate(&self, trial: &DVector<f64>, d: &DVector<f64>) -> Option<DVector<f64>> {
        if !self.joint() {
            return None;
        }
        let mut snapped = trial.clone();
        for i in 0..self.n() {
            if d[i] > SNAP_TOL {
                snapped[i] = self.upsilon;
            } else if d[i] < -SNAP_TOL {
                snapped[i] = 1.0;
            }
        }
        Some(snapped)
    }
}

fn state_from(
    prob: &Relaxed,
    scenario: &Scenario,
    z: &DVector<f64>,
    step: Option<&QpStep>,
    iteration: usize,
) -> SqpState {
    let n = prob.n();
    let (layers, vehicle_freq, rsu_freq) = prob.unpack(z);
    let mut state = SqpState {
        layers,
        vehicle_freq,
        rsu_freq,
        lambda: vec![0.0; n],
        mu: vec![0.0; n],
        gamma: vec![0.0; n],
        sigma: vec![0.0; scenario.rsu_count()],
        iteration,
        kkt_residual: step.map_or(f64::INFINITY, |s| s.kkt_residual),
    };
    if let Some(s) = step {
        let off = if prob.joint() { 2 * n } else { 0 };
        for (i, c) in prob.coeffs.iter().enumerate() {
            if prob.joint() {
                state.lambda[i] = prob.scale * s.duals_in[i];
                state.mu[i] = prob.scale * s.duals_in[n + i];
            }
            state.gamma[i] = prob.scale * s.duals_in[off + i] / c.f_max;
        }
        for (k, (m, _)) in prob.groups.iter().enumerate() {
            state.sigma[*m] = prob.scale * s.duals_eq[k] / scenario.rsus[*m].hardware.f_max;
        }
    }
    state
}

/// Performs a single SQP iteration from `state` on the relaxed problem.
///
/// The objective is normalised by its value at `state`. Multipliers of the
/// returned state are the QP duals, converted back to original units.
pub fn sqp_step(
    state: &SqpState,
    scenario: &Scenario,
    weights: Weights,
    options: &SqpOptions,
) -> Result<(SqpState, StepDiagnostics)> {
    state.check(scenario)?;
    let mut prob = Relaxed::new(scenario, weights, None, options.floor_fraction)?;
    let z = prob.pack(&state.layers, &state.vehicle_freq, &state.rsu_freq);
    let violation = prob.lin.max_violation(&z);
    if violation > 1e-9 {
        return Err(invalid!(
            "sqp_step needs a feasible state (violation {violation:e})"
        ));
    }
    prob.rescale(&z);
    let step = qp_step(&prob, &z, &options.qp)?;
    let (next, diag) = take_step(&prob, &z, &step, options.full_step);
    Ok((
        state_from(&prob, scenario, &next, Some(&step), state.iteration + 1),
        diag,
    ))
}

fn run_sqp(prob: &mut Relaxed, mut z: DVector<f64>, opts: &SqpOptions) -> Result<RunOutcome> {
    prob.project_start(&mut z);
    nlp::run(
        prob,
        z,
        RunOptions {
            max_iterations: opts.max_iterations,
            tolerance: opts.kkt_tolerance,
            full_step: opts.full_step,
            qp: &opts.qp,
        },
    )
}

/// Rounds a relaxed split to the nearest integer in `1..=Υ`; exact halves
/// round down.
pub fn round_layers(layers: &[f64], layer_count: u32) -> Vec<u32> {
    let upsilon = f64::from(layer_count);
    layers
        .iter()
        .map(|&a| {
            let base = libm::floor(a);
            let r = if a - base > 0.5 { base + 1.0 } else { base };
            r.clamp(1.0, upsilon) as u32
        })
        .collect()
}

/// Result of [`solve_subproblem1`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sp1Solution {
    pub layers: Vec<u32>,
    pub vehicle_freq: Vec<f64>,
    pub rsu_freq: Vec<f64>,
    /// Objective of the returned integer point.
    pub objective: f64,
    /// Relaxed SQP iterate before rounding.
    pub relaxed: SqpState,
    pub relaxed_objective: f64,
    /// Relaxed SQP run.
    pub diagnostics: SolverDiagnostics,
    /// Frequency-only pass after rounding.
    pub repair: SolverDiagnostics,
}

/// Re-optimises the GPU frequencies for a fixed integer split.
pub fn optimize_frequencies(
    scenario: &Scenario,
    weights: Weights,
    layers: &[u32],
    start: Option<(&[f64], &[f64])>,
    options: &SqpOptions,
) -> Result<(Vec<f64>, Vec<f64>, SolverDiagnostics)> {
    let n = scenario.vehicle_count();
    if layers.len() != n {
        return Err(invalid!("expected {n} layer counts, got {}", layers.len()));
    }
    let fixed: Vec<f64> = layers.iter().map(|&a| f64::from(a)).collect();
    let mut prob = Relaxed::new(
        scenario,
        weights,
        Some(fixed.clone()),
        options.floor_fraction,
    )?;
    let init = SqpState::initial(scenario);
    let (freq, rsu) = start.unwrap_or((&init.vehicle_freq, &init.rsu_freq));
    if freq.len() != n || rsu.len() != n {
        return Err(invalid!("frequency start does not match the scenario"));
    }
    let z0 = prob.pack(&fixed, freq, rsu);
    let out = run_sqp(&mut prob, z0, options)?;
    let (_, f, fr) = prob.unpack(&out.z);
    Ok((f, fr, out.diagnostics))
}

/// Solves the layer-split / frequency sub-problem.
///
/// Runs the relaxed SQP from [`SqpState::initial`], rounds the split, and
/// repairs the frequencies with the split fixed. The returned point never has
/// a larger objective than the starting point (`warm_start` when given, else
/// the rounded default initialisation).
pub fn solve_subproblem1(
    scenario: &Scenario,
    weights: Weights,
    options: &SqpOptions,
    warm_start: Option<&Allocation>,
) -> Result<Sp1Solution> {
    scenario.validate()?;
    let layer_count = scenario.llm.layer_count;
    let init = SqpState::initial(scenario);
    let mut prob = Relaxed::new(scenario, weights, None, options.floor_fraction)?;
    let z0 = prob.pack(&init.layers, &init.vehicle_freq, &init.rsu_freq);
    let relaxed_run = run_sqp(&mut prob, z0, options)?;
    let relaxed = state_from(
        &prob,
        scenario,
        &relaxed_run.z,
        relaxed_run.last_step.as_ref(),
        relaxed_run.diagnostics.iterations,
    );
    let relaxed_objective = prob.raw_objective(&relaxed_run.z);

    let layers = round_layers(&relaxed.layers, layer_count);
    let (freq, rsu_freq, repair) = optimize_frequencies(
        scenario,
        weights,
        &layers,
        Some((&relaxed.vehicle_freq, &relaxed.rsu_freq)),
        options,
    )?;
    let coeffs = coefficients(scenario)?;
    let w = cost_weights(weights);
    let upsilon = f64::from(layer_count);
    let eval = |layers: &[u32], f: &[f64], fr: &[f64]| {
        let a: Vec<f64> = layers.iter().map(|&x| f64::from(x)).collect();
        objective_raw(&coeffs, w, upsilon, &a, f, fr)
    };
    let mut best = Sp1Solution {
        objective: eval(&layers, &freq, &rsu_freq),
        layers,
        vehicle_freq: freq,
        rsu_freq,
        relaxed,
        relaxed_objective,
        diagnostics: relaxed_run.diagnostics,
        repair,
    };

    let fallback = match warm_start {
        Some(a) => {
            if a.layers.len() != scenario.vehicle_count() {
                return Err(invalid!("warm start does not match the scenario"));
            }
            (a.layers.clone(), a.vehicle_freq.clone(), a.rsu_freq.clone())
        }
        None => (
            round_layers(&init.layers, layer_count),
            init.vehicle_freq.clone(),
            init.rsu_freq.clone(),
        ),
    };
    let fallback_objective = eval(&fallback.0, &fallback.1, &fallback.2);
    if fallback_objective < best.objective {
        best.layers = fallback.0;
        best.vehicle_freq = fallback.1;
        best.rsu_freq = fallback.2;
        best.objective = fallback_objective;
        best.repair.note = Some("kept starting point; rounded solution was worse".into());
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::total_cost;
    use crate::scenario::{generate_scenario, ScenarioParams, VehicleState};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scenario(vehicles: usize, rsus: usize, seed: u64) -> Scenario {
        generate_scenario(&ScenarioParams {
            vehicles,
            rsus,
            seed,
            ..ScenarioParams::default()
        })
        .unwrap()
    }

    fn symmetric(n: usize) -> Scenario {
        let base = scenario(1, 1, 3);
        let v: VehicleState = base.vehicles[0].clone();
        Scenario::new(
            base.params.clone(),
            vec![v; n],
            base.rsus.clone(),
            vec![base.gains[0].clone(); n],
            vec![0; n],
        )
        .unwrap()
    }

    fn random_state(s: &Scenario, rng: &mut ChaCha8Rng) -> SqpState {
        let upsilon = f64::from(s.llm.layer_count);
        let mut st = SqpState::initial(s);
        for i in 0..s.vehicle_count() {
            st.layers[i] = rng.random_range(1.0..upsilon);
            st.vehicle_freq[i] = s.vehicles[i].hardware.f_max * rng.random_range(0.05..1.0);
            st.rsu_freq[i] = s.rsus[s.association[i]].hardware.f_max * rng.random_range(0.05..1.0);
        }
        let scale = eval_objective(&st, s, Weights::from_time(0.5).unwrap()).unwrap();
        for i in 0..s.vehicle_count() {
            st.lambda[i] = scale * rng.random_range(0.0..1.0);
            st.mu[i] = scale * rng.random_range(0.0..1.0);
            st.gamma[i] = scale * rng.random_range(0.0..1.0) / s.vehicles[i].hardware.f_max;
        }
        for m in 0..s.rsu_count() {
            st.sigma[m] = scale * rng.random_range(0.0..1.0) / s.rsus[m].hardware.f_max;
        }
        st
    }

    fn get(st: &SqpState, lay: LagrangianLayout, k: usize) -> f64 {
        let n = lay.vehicles;
        match k / n.max(1) {
            _ if k >= 6 * n => st.sigma[k - 6 * n],
            0 => st.layers[k],
            1 => st.vehicle_freq[k - n],
            2 => st.rsu_freq[k - 2 * n],
            3 => st.lambda[k - 3 * n],
            4 => st.mu[k - 4 * n],
            _ => st.gamma[k - 5 * n],
        }
    }

    fn set(st: &mut SqpState, lay: LagrangianLayout, k: usize, v: f64) {
        let n = lay.vehicles;
        let slot = match k / n.max(1) {
            _ if k >= 6 * n => &mut st.sigma[k - 6 * n],
            0 => &mut st.layers[k],
            1 => &mut st.vehicle_freq[k - n],
            2 => &mut st.rsu_freq[k - 2 * n],
            3 => &mut st.lambda[k - 3 * n],
            4 => &mut st.mu[k - 4 * n],
            _ => &mut st.gamma[k - 5 * n],
        };
        *slot = v;
    }

    fn step(x: f64) -> f64 {
        1e-6 * x.abs().max(1e-30)
    }

    #[test]
    fn objective_plus_uplink_energy_is_total_cost() {
        let s = scenario(6, 2, 11);
        let w = Weights::from_time(0.3).unwrap();
        let mut st = SqpState::initial(&s);
        st.layers = vec![5.0, 1.0, 32.0, 17.0, 9.0, 20.0];
        let mut power = Vec::new();
        let mut bandwidth = Vec::new();
        for i in 0..6 {
            power.push(0.5 + i as f64);
            bandwidth.push(
                s.rsus[s.association[i]].hardware.b_max / s.members(s.association[i]).len() as f64,
            );
        }
        let alloc = Allocation {
            layers: st.layers.iter().map(|&a| a as u32).collect(),
            power: power.clone(),
            bandwidth: bandwidth.clone(),
            vehicle_freq: st.vehicle_freq.clone(),
            rsu_freq: st.rsu_freq.clone(),
        };
        let total = total_cost(&s, &alloc, w).unwrap();
        let comm: f64 = total.vehicles.iter().map(|v| v.comm_energy).sum();
        let f = eval_objective(&st, &s, w).unwrap();
        assert!(
            ((f + w.energy() * comm) - total.weighted_total).abs() <= 1e-10 * total.weighted_total
        );
    }

    #[test]
    fn no_offload_has_no_rsu_terms() {
        let s = scenario(3, 1, 2);
        let w = Weights::from_time(0.6).unwrap();
        let mut st = SqpState::initial(&s);
        st.layers = vec![32.0; 3];
        let f = eval_objective(&st, &s, w).unwrap();
        st.rsu_freq = vec![1.0; 3];
        assert_eq!(eval_objective(&st, &s, w).unwrap(), f);
    }

    #[test]
    fn single_vehicle_by_hand() {
        let s = scenario(1, 1, 8);
        let w = Weights::from_time(0.4).unwrap();
        let mut st = SqpState::initial(&s);
        st.layers = vec![7.0];
        st.vehicle_freq = vec![1.1e9];
        let v = s.vehicles[0].hardware;
        let r = s.rsus[0].hardware;
        let psi = s.flops(0).unwrap();
        let t = psi / (1.1e9 * f64::from(v.cores) * f64::from(v.flops_per_cycle));
        let e = v.kappa * 1.1e9 * 1.1e9 * psi / (f64::from(v.cores) * f64::from(v.flops_per_cycle));
        let tr = psi / (r.f_max * f64::from(r.cores) * f64::from(r.flops_per_cycle));
        let er =
            r.kappa * r.f_max * r.f_max * psi / (f64::from(r.cores) * f64::from(r.flops_per_cycle));
        let expect = 7.0 * (0.4 * t + 0.6 * e) + 25.0 * (0.4 * tr + 0.6 * er);
        let got = eval_objective(&st, &s, w).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn zero_frequency_rejected() {
        let s = scenario(2, 1, 1);
        let mut st = SqpState::initial(&s);
        st.vehicle_freq[1] = 0.0;
        assert!(eval_objective(&st, &s, Weights::from_time(0.5).unwrap()).is_err());
        assert!(eval_gradient(&st, &s, Weights::from_time(0.5).unwrap()).is_err());
    }

    #[test]
    fn gradient_without_multipliers_is_objective_gradient() {
        let s = scenario(4, 2, 5);
        let w = Weights::from_time(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = random_state(&s, &mut rng);
        st.lambda.fill(0.0);
        st.mu.fill(0.0);
        st.gamma.fill(0.0);
        st.sigma.fill(0.0);
        let g = eval_gradient(&st, &s, w).unwrap();
        let lay = LagrangianLayout::of(&s);
        for k in 0..3 * lay.vehicles {
            let x = get(&st, lay, k);
            let h = step(x);
            let mut p = st.clone();
            set(&mut p, lay, k, x + h);
            let mut m = st.clone();
            set(&mut m, lay, k, x - h);
            let fd = (eval_objective(&p, &s, w).unwrap() - eval_objective(&m, &s, w).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-12),
                "{k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn lambda_partial_vanishes_at_lower_bound() {
        let s = scenario(3, 1, 5);
        let mut st = SqpState::initial(&s);
        st.layers[1] = 1.0;
        let g = eval_gradient(&st, &s, Weights::from_time(0.5).unwrap()).unwrap();
        assert_eq!(g[LagrangianLayout::of(&s).lambda(1)], 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let w = Weights::from_time(0.35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..10 {
            let s = scenario(3, 2, seed);
            let st = random_state(&s, &mut rng);
            let lay = LagrangianLayout::of(&s);
            let g = eval_gradient(&st, &s, w).unwrap();
            let h = eval_hessian(&st, &s, w).unwrap();
            assert_eq!(h, h.transpose());
            for k in 0..lay.len() {
                let x = get(&st, lay, k);
                let dx = step(x);
                let mut p = st.clone();
                set(&mut p, lay, k, x + dx);
                let mut m = st.clone();
                set(&mut m, lay, k, x - dx);
                let fd = (eval_lagrangian(&p, &s, w).unwrap()
                    - eval_lagrangian(&m, &s, w).unwrap())
                    / (2.0 * dx);
                let tol = 1e-5 * g[k].abs().max(1e-9 * (g.amax()));
                assert!(
                    (fd - g[k]).abs() <= tol.max(1e-5 * g[k].abs()),
                    "grad {k}: {fd} vs {}",
                    g[k]
                );
                let gp = eval_gradient(&p, &s, w).unwrap();
                let gm = eval_gradient(&m, &s, w).unwrap();
                for r in 0..lay.len() {
                    let fd = (gp[r] - gm[r]) / (2.0 * dx);
                    let exact = h[(r, k)];
                    let floor = 1e-7 * (gp[r].abs() + gm[r].abs()) / dx;
                    assert!(
                        (fd - exact).abs() <= 1e-4 * exact.abs() + floor,
                        "hess ({r},{k}): {fd} vs {exact}"
                    );
                }
            }
            for i in 0..lay.vehicles {
                assert_eq!(h[(lay.layers(i), lay.layers(i))], 0.0);
            }
        }
    }

    fn exhaustive_single(s: &Scenario, w: Weights) -> f64 {
        let upsilon = s.llm.layer_count;
        let fmax = s.vehicles[0].hardware.f_max;
        let mut best = f64::INFINITY;
        for a in 1..=upsilon {
            for k in 0..10_000 {
                let f = fmax * (1e-3 + (1.0 - 1e-3) * k as f64 / 9_999.0);
                let mut st = SqpState::initial(s);
                st.layers = vec![f64::from(a)];
                st.vehicle_freq = vec![f];
                st.rsu_freq = vec![s.rsus[0].hardware.f_max];
                best = best.min(eval_objective(&st, s, w).unwrap());
            }
        }
        best
    }

    #[test]
    fn single_vehicle_matches_exhaustive_search() {
        for (seed, wt) in [(1, 0.1), (2, 0.5), (3, 0.9), (4, 0.02)] {
            let s = scenario(1, 1, seed);
            let w = Weights::from_time(wt).unwrap();
            let sol = solve_subproblem1(&s, w, &SqpOptions::default(), None).unwrap();
            let oracle = exhaustive_single(&s, w);
            assert!(
                sol.objective <= oracle * 1.01,
                "wt {wt}: {} vs {oracle}",
                sol.objective
            );
        }
    }

    #[test]
    fn symmetric_vehicles_get_identical_allocations() {
        let s = symmetric(4);
        let sol = solve_subproblem1(
            &s,
            Weights::from_time(0.5).unwrap(),
            &SqpOptions::default(),
            None,
        )
        .unwrap();
        let fmax = s.rsus[0].hardware.f_max;
        for i in 1..4 {
            assert_eq!(sol.layers[i], sol.layers[0]);
            assert!(
                (sol.vehicle_freq[i] - sol.vehicle_freq[0]).abs() <= 1e-6 * sol.vehicle_freq[0]
            );
        }
        for fr in &sol.rsu_freq {
            assert!((fr - fmax / 4.0).abs() <= 1e-6 * fmax);
        }
    }

    #[test]
    fn pure_energy_drives_vehicle_clocks_to_floor() {
        let s = scenario(5, 2, 9);
        let opts = SqpOptions::default();
        let sol = solve_subproblem1(&s, Weights::from_time(0.0).unwrap(), &opts, None).unwrap();
        for (i, f) in sol.vehicle_freq.iter().enumerate() {
            let floor = opts.floor_fraction * s.vehicles[i].hardware.f_max;
            assert!((f - floor).abs() <= 1e-6 * floor, "{f} vs {floor}");
        }
    }

    #[test]
    fn merit_never_increases() {
        let w = Weights::from_time(0.5).unwrap();
        for seed in 0..10 {
            let s = scenario(8, 3, seed);
            let opts = SqpOptions::default();
            let mut st = SqpState::initial(&s);
            for _ in 0..15 {
                let (next, d) = sqp_step(&st, &s, w, &opts).unwrap();
                assert!(d.merit_after <= d.merit_before + 1e-12 * d.merit_before.abs());
                let upsilon = f64::from(s.llm.layer_count);
                assert!(next
                    .layers
                    .iter()
                    .all(|&a| a >= 1.0 - 1e-9 && a <= upsilon + 1e-9));
                st = next;
            }
        }
    }

    #[test]
    fn kkt_point_is_a_fixed_point() {
        let s = scenario(4, 2, 21);
        let w = Weights::from_time(0.5).unwrap();
        let opts = SqpOptions::default();
        let mut st = SqpState::initial(&s);
        for _ in 0..opts.max_iterations {
            let (next, d) = sqp_step(&st, &s, w, &opts).unwrap();
            if d.kkt_residual <= 1e-9 {
                assert!(d.step_norm <= 1e-8);
                assert!(next
                    .layers
                    .iter()
                    .zip(&st.layers)
                    .all(|(a, b)| (a - b).abs() <= 1e-8));
                return;
            }
            st = next;
        }
        panic!("no kkt point reached");
    }

    #[test]
    fn rounding_costs_little_and_stays_feasible() {
        let w = Weights::from_time(0.5).unwrap();
        for seed in 0..5 {
            let s = scenario(20, 5, seed);
            let opts = SqpOptions::default();
            let sol = solve_subproblem1(&s, w, &opts, None).unwrap();
            assert!(sol.diagnostics.converged, "{:?}", sol.diagnostics);
            assert!(sol.diagnostics.residual <= 1e-6);
            assert!(sol.objective <= sol.relaxed_objective * 1.05);
            let init = SqpState::initial(&s);
            let rounded = SqpState {
                layers: round_layers(&init.layers, 32)
                    .iter()
                    .map(|&a| f64::from(a))
                    .collect(),
                ..init
            };
            assert!(sol.objective <= eval_objective(&rounded, &s, w).unwrap());
            for m in 0..s.rsu_count() {
                let members = s.members(m);
                if members.is_empty() {
                    continue;
                }
                let total: f64 = members.iter().map(|&i| sol.rsu_freq[i]).sum();
                assert!(
                    (total - s.rsus[m].hardware.f_max).abs() <= 1e-6 * s.rsus[m].hardware.f_max
                );
            }
            for (i, f) in sol.vehicle_freq.iter().enumerate() {
                assert!(*f <= s.vehicles[i].hardware.f_max * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(
            round_layers(&[0.2, 1.5, 2.5, 2.51, 7.9, 40.0], 32),
            vec![1, 1, 2, 3, 8, 32]
        );
        assert_eq!(round_layers(&[16.0], 32), vec![16]);
    }
}
