//! Reference allocators: random split with optimised resources (RLOR) and
//! random resources with optimised split (RROL).

use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ao::AoOptions;
use crate::error::Result;
use crate::fractional::solve_subproblem2;
use crate::model::{check_feasibility, layer_terms, Allocation, Weights};
use crate::scenario::Scenario;
use crate::sqp::optimize_frequencies;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Rlor,
    Rrol,
}

pub fn baseline_allocate(
    kind: BaselineKind,
    scenario: &Scenario,
    weights: Weights,
    seed: u64,
    options: &AoOptions,
) -> Result<Allocation> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alloc = match kind {
        BaselineKind::Rlor => rlor(scenario, weights, &mut rng, options)?,
        BaselineKind::Rrol => rrol(scenario, weights, &mut rng)?,
    };
    check_feasibility(scenario, &alloc)?;
    Ok(alloc)
}

fn rlor(
    scenario: &Scenario,
    weights: Weights,
    rng: &mut ChaCha8Rng,
    options: &AoOptions,
) -> Result<Allocation> {
    let upsilon = scenario.llm.layer_count;
    let layers: Vec<u32> = (0..scenario.vehicle_count())
        .map(|_| rng.random_range(1..=upsilon))
        .collect();
    let (vehicle_freq, rsu_freq, _) =
        optimize_frequencies(scenario, weights, &layers, None, &options.sqp)?;
    let sp2 = solve_subproblem2(scenario, weights, &options.frac, None)?;
    Ok(Allocation {
        layers,
        power: sp2.state.power,
        bandwidth: sp2.state.bandwidth,
        vehicle_freq,
        rsu_freq,
    })
}

/// Uniform draw on `(0, 1]`.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random_range(0.0..1.0)
}

/// Per-RSU shares drawn uniformly and rescaled to the budget.
fn random_shares(
    scenario: &Scenario,
    rng: &mut ChaCha8Rng,
    budget: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let mut shares: Vec<f64> = (0..scenario.vehicle_count()).map(|_| unit(rng)).collect();
    for m in 0..scenario.rsu_count() {
        let members = scenario.members(m);
        let sum: f64 = members.iter().map(|&i| shares[i]).sum();
        for &i in &members {
            shares[i] *= budget(m) / sum;
        }
    }
    shares
}

fn rrol(scenario: &Scenario, weights: Weights, rng: &mut ChaCha8Rng) -> Result<Allocation> {
    let power: Vec<f64> = scenario
        .vehicles
        .iter()
        .map(|v| v.hardware.p_max * unit(rng))
        .collect();
    let vehicle_freq: Vec<f64> = scenario
        .vehicles
        .iter()
        .map(|v| v.hardware.f_max * unit(rng))
        .collect();
    let bandwidth = random_shares(scenario, rng, |m| scenario.rsus[m].hardware.b_max);
    let rsu_freq = random_shares(scenario, rng, |m| scenario.rsus[m].hardware.f_max);
    let layers = (0..scenario.vehicle_count())
        .map(|i| best_split(scenario, weights, i, vehicle_freq[i], rsu_freq[i]))
        .collect::<Result<Vec<u32>>>()?;
    Ok(Allocation {
        layers,
        power,
        bandwidth,
        vehicle_freq,
        rsu_freq,
    })
}

/// Cheapest split for one vehicle at fixed clocks, by enumeration; ties go
/// to the smaller split.
pub fn best_split(
    scenario: &Scenario,
    weights: Weights,
    vehicle: usize,
    freq: f64,
    rsu_freq: f64,
) -> Result<u32> {
    let t = layer_terms(scenario, vehicle, freq, rsu_freq)?;
    let (wt, we) = (weights.time(), weights.energy());
    let local = wt * t.local_time + we * t.local_energy;
    let remote = wt * t.remote_time + we * t.remote_energy;
    let upsilon = scenario.llm.layer_count;
    let mut best = (1, f64::INFINITY);
    for a in 1..=upsilon {
        let cost = f64::from(a) * local + f64::from(upsilon - a) * remote;
        if cost < best.1 {
            best = (a, cost);
        }
    }
    Ok(best.0)
}
