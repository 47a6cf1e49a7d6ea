//! Alternating optimisation over the two variable blocks.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fractional::{default_start, solve_subproblem2, FracOptions};
use crate::model::{check_feasibility, total_cost, Allocation, Weights};
use crate::scenario::Scenario;
use crate::sqp::{round_layers, solve_subproblem1, SqpOptions, SqpState};

#[derive(Debug, Clone, PartialEq)]
pub struct AoOptions {
    pub max_rounds: usize,
    /// Relative change of the weighted total at which the loop stops.
    pub tolerance: f64,
    pub sqp: SqpOptions,
    pub frac: FracOptions,
}

impl Default for AoOptions {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            tolerance: 1e-4,
            sqp: SqpOptions::default(),
            frac: FracOptions::default(),
        }
    }
}

/// Millisecond wall clock supplied by the caller.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Reports zero for every stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoRound {
    pub round: usize,
    pub weighted_total: f64,
    /// KKT residual of the relaxed layer/clock solve.
    pub sp1_residual: f64,
    /// Fixed-point residual of the power/bandwidth solve.
    pub sp2_residual: f64,
    pub sp1_converged: bool,
    pub sp2_converged: bool,
    pub sp1_ms: f64,
    pub sp2_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AoTrace {
    /// Weighted total at the initial allocation.
    pub initial_total: f64,
    pub rounds: Vec<AoRound>,
    pub converged: bool,
    pub note: Option<String>,
}

impl AoTrace {
    /// Initial total followed by the total after each round.
    pub fn totals(&self) -> Vec<f64> {
        core::iter::once(self.initial_total)
            .chain(self.rounds.iter().map(|r| r.weighted_total))
            .collect()
    }

    /// Whether no round raised the total by more than `rel_tol` relative.
    pub fn is_non_increasing(&self, rel_tol: f64) -> bool {
        self.totals()
            .windows(2)
            .all(|w| w[1] <= w[0] + rel_tol * w[0].abs())
    }
}

/// A sub-solver failed; carries what was computed before the failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("alternating optimisation failed after {} rounds: {error}", trace.rounds.len())]
pub struct AoFailure {
    pub error: Error,
    pub trace: AoTrace,
    pub best: Option<Allocation>,
}

/// Split from the rounded default SQP start, default clocks, `p = p_max/2`
/// and equal bandwidth shares.
pub fn initial_allocation(scenario: &Scenario) -> Allocation {
    let init = SqpState::initial(scenario);
    let (power, bandwidth) = default_start(scenario);
    Allocation {
        layers: round_layers(&init.layers, scenario.llm.layer_count),
        power,
        bandwidth,
        vehicle_freq: init.vehicle_freq,
        rsu_freq: init.rsu_freq,
    }
}

/// Alternates the layer/clock solve and the power/bandwidth solve, each
/// warm-started from the current allocation, until the weighted total stops
/// moving. Returns the best allocation seen.
#[allow(clippy::result_large_err)]
pub fn alternating_optimize(
    scenario: &Scenario,
    weights: Weights,
    options: &AoOptions,
    clock: &dyn Clock,
) -> core::result::Result<(Allocation, AoTrace), AoFailure> {
    let mut trace = AoTrace::default();
    let fail =
        |error: Error, trace: AoTrace, best: Option<Allocation>| AoFailure { error, trace, best };
    if let Err(e) = scenario.validate() {
        return Err(fail(e, trace, None));
    }
    let mut current = initial_allocation(scenario);
    let initial_total = match total_cost(scenario, &current, weights) {
        Ok(c) => c.weighted_total,
        Err(e) => return Err(fail(e, trace, None)),
    };
    trace.initial_total = initial_total;
    let mut best = (current.clone(), initial_total);
    let mut previous = initial_total;

    for round in 1..=options.max_rounds {
        let step = ao_round(scenario, weights, options, clock, &mut current, round);
        let entry = match step {
            Ok(entry) => entry,
            Err(e) => return Err(fail(e, trace, Some(best.0))),
        };
        let total = entry.weighted_total;
        trace.rounds.push(entry);
        if total <= best.1 {
            best = (current.clone(), total);
        }
        if (previous - total).abs() <= options.tolerance * previous.abs() {
            trace.converged = true;
            break;
        }
        previous = total;
    }
    if !trace.converged {
        trace.note = Some(alloc::format!(
            "stopped after {} rounds",
            options.max_rounds
        ));
    }
    if let Err(e) = check_feasibility(scenario, &best.0) {
        return Err(fail(e, trace, None));
    }
    Ok((best.0, trace))
}

fn ao_round(
    scenario: &Scenario,
    weights: Weights,
    options: &AoOptions,
    clock: &dyn Clock,
    current: &mut Allocation,
    round: usize,
) -> Result<AoRound> {
    let t0 = clock.now_ms();
    let sp1 = solve_subproblem1(scenario, weights, &options.sqp, Some(current))?;
    let t1 = clock.now_ms();
    current.layers = sp1.layers;
    current.vehicle_freq = sp1.vehicle_freq;
    current.rsu_freq = sp1.rsu_freq;
    let sp2 = solve_subproblem2(
        scenario,
        weights,
        &options.frac,
        Some((&current.power, &current.bandwidth)),
    )?;
    let t2 = clock.now_ms();
    current.power = sp2.state.power;
    current.bandwidth = sp2.state.bandwidth;
    let total = total_cost(scenario, current, weights)?.weighted_total;
    Ok(AoRound {
        round,
        weighted_total: total,
        sp1_residual: sp1.diagnostics.residual,
        sp2_residual: sp2.diagnostics.residual,
        sp1_converged: sp1.diagnostics.converged,
        sp2_converged: sp2.diagnostics.converged,
        sp1_ms: t1 - t0,
        sp2_ms: t2 - t1,
    })
}
