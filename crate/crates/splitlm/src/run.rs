//! One method on one scenario at one weighting.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use splitlm_core::ao::{alternating_optimize, AoOptions, AoTrace, Clock};
use splitlm_core::baseline::{baseline_allocate, BaselineKind};
use splitlm_core::metrics::{completion_time_metric, CompletionTime};
use splitlm_core::model::total_cost;
use splitlm_core::{Allocation, CostBreakdown, Scenario, Weights};

use crate::Result;

/// Milliseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::start()
    }
}

impl Clock for StdClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Rlor,
    Rrol,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::Rlor, Method::Rrol];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Rlor => "rlor",
            Method::Rrol => "rrol",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub weight_time: f64,
    pub seed: u64,
    pub allocation: Allocation,
    pub cost: CostBreakdown,
    pub completion: CompletionTime,
    /// Present for the proposed method only.
    pub trace: Option<AoTrace>,
    pub converged: bool,
    pub note: Option<String>,
    pub wall_ms: f64,
}

impl SolveReport {
    pub fn ao_rounds(&self) -> usize {
        self.trace.as_ref().map_or(0, |t| t.rounds.len())
    }
}

/// Runs `method` at `ω_t = weight_time`. `seed` drives the random baselines.
///
/// A proposed-method run that fails part way still reports the best
/// allocation it reached, flagged as not converged.
pub fn solve_method(
    scenario: &Scenario,
    weight_time: f64,
    method: Method,
    seed: u64,
    options: &AoOptions,
) -> Result<SolveReport> {
    let weights = Weights::from_time(weight_time)?;
    let clock = StdClock::start();
    let (allocation, trace, converged, note) = match method {
        Method::Proposed => match alternating_optimize(scenario, weights, options, &clock) {
            Ok((alloc, trace)) => {
                let converged = trace.converged;
                let note = trace.note.clone();
                (alloc, Some(trace), converged, note)
            }
            Err(failure) => match failure.best.clone() {
                Some(best) => {
                    let note = Some(failure.error.to_string());
                    (best, Some(failure.trace), false, note)
                }
                None => return Err(failure.into()),
            },
        },
        Method::Rlor => (
            baseline_allocate(BaselineKind::Rlor, scenario, weights, seed, options)?,
            None,
            true,
            None,
        ),
        Method::Rrol => (
            baseline_allocate(BaselineKind::Rrol, scenario, weights, seed, options)?,
            None,
            true,
            None,
        ),
    };
    let wall_ms = clock.now_ms();
    let cost = total_cost(scenario, &allocation, weights)?;
    let completion = completion_time_metric(scenario, &allocation)?;
    Ok(SolveReport {
        method,
        weight_time,
        seed,
        allocation,
        cost,
        completion,
        trace,
        converged,
        note,
        wall_ms,
    })
}
