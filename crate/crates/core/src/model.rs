//! Closed-form delay and energy model for split transformer inference.
//!
//! A vehicle runs the first `α` transformer layers of the model on its own
//! GPU, ships the intermediate activations over an FDMA uplink, and the
//! associated roadside unit runs the remaining `Υ − α` layers on a slice of
//! its GPU clock. Every function here is pure.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Constraint, Error, Result};
use crate::scenario::Scenario;

/// Shape of the language model being split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmProfile {
    pub hidden_size: u32,
    pub layer_count: u32,
    pub batch_size: u32,
}

impl Default for LlmProfile {
    /// A 7B-class decoder: hidden size 4096, 32 layers, batch of one.
    fn default() -> Self {
        Self {
            hidden_size: 4096,
            layer_count: 32,
            batch_size: 1,
        }
    }
}

impl LlmProfile {
    pub fn new(hidden_size: u32, layer_count: u32, batch_size: u32) -> Result<Self> {
        let profile = Self {
            hidden_size,
            layer_count,
            batch_size,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.layer_count == 0 || self.batch_size == 0 {
            return Err(invalid!(
                "llm profile fields must be >= 1 (hidden {}, layers {}, batch {})",
                self.hidden_size,
                self.layer_count,
                self.batch_size
            ));
        }
        Ok(())
    }
}

/// Delay/energy preference pair. The two weights always sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct Weights {
    time: f64,
    energy: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    time: f64,
    energy: f64,
}

impl TryFrom<RawWeights> for Weights {
    type Error = Error;

    fn try_from(raw: RawWeights) -> Result<Self> {
        Weights::new(raw.time, raw.energy)
    }
}

impl Weights {
    pub fn new(time: f64, energy: f64) -> Result<Self> {
        if !(time.is_finite() && energy.is_finite()) || time < 0.0 || energy < 0.0 {
            return Err(invalid!(
                "weights must be finite and non-negative ({time}, {energy})"
            ));
        }
        if time + energy != 1.0 {
            return Err(invalid!("weights must sum to 1, got {time} + {energy}"));
        }
        Ok(Self { time, energy })
    }

    /// Builds the pair from the delay weight; the energy weight is `1 − ω_t`.
    pub fn from_time(time: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&time) {
            return Err(invalid!("delay weight must lie in [0, 1], got {time}"));
        }
        Self::new(time, 1.0 - time)
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.time
    }

    #[inline]
    pub fn energy(&self) -> f64 {
        self.energy
    }
}

/// Vehicle-side GPU and radio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleHardware {
    /// Maximum GPU clock, cycles/s.
    pub f_max: f64,
    pub cores: u32,
    /// FLOPs per cycle per core.
    pub flops_per_cycle: u32,
    /// Power coefficient in W/(cycles/s)^3.
    pub kappa: f64,
    /// Maximum transmit power, W.
    pub p_max: f64,
}

impl Default for VehicleHardware {
    fn default() -> Self {
        Self {
            f_max: 1.5e9,
            cores: 2048,
            flops_per_cycle: 2,
            kappa: 1e-27,
            p_max: 20.0,
        }
    }
}

impl VehicleHardware {
    pub fn validate(&self) -> Result<()> {
        if !(positive(self.f_max) && positive(self.kappa) && positive(self.p_max))
            || self.cores == 0
            || self.flops_per_cycle == 0
        {
            return Err(invalid!(
                "vehicle hardware parameters must be strictly positive: {self:?}"
            ));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn throughput_per_hz(&self) -> f64 {
        f64::from(self.cores) * f64::from(self.flops_per_cycle)
    }
}

/// Roadside-unit GPU and bandwidth budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsuHardware {
    /// Total GPU clock shared among associated vehicles, cycles/s.
    pub f_max: f64,
    pub cores: u32,
    pub flops_per_cycle: u32,
    pub kappa: f64,
    /// Uplink bandwidth shared among associated vehicles, Hz.
    pub b_max: f64,
}

impl Default for RsuHardware {
    fn default() -> Self {
        Self {
            f_max: 2.0e9,
            cores: 10240,
            flops_per_cycle: 2,
            kappa: 1e-27,
            b_max: 20e6,
        }
    }
}

impl RsuHardware {
    pub fn validate(&self) -> Result<()> {
        if !(positive(self.f_max) && positive(self.kappa) && positive(self.b_max))
            || self.cores == 0
            || self.flops_per_cycle == 0
        {
            return Err(invalid!(
                "rsu hardware parameters must be strictly positive: {self:?}"
            ));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn throughput_per_hz(&self) -> f64 {
        f64::from(self.cores) * f64::from(self.flops_per_cycle)
    }
}

#[inline]
fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Forward-pass FLOPs of one transformer layer for `token_count` tokens:
/// `24·B·d·h² + 4·B·d²·h`.
///
/// Evaluated in 128-bit integers, so the result is exact whenever it fits
/// in the 53-bit mantissa (every realistic shape does).
pub fn flops_per_layer(token_count: u32, profile: &LlmProfile) -> Result<f64> {
    if token_count == 0 {
        return Err(invalid!("token count must be >= 1"));
    }
    profile.validate()?;
    let d = u128::from(token_count);
    let h = u128::from(profile.hidden_size);
    let b = u128::from(profile.batch_size);
    Ok((24 * b * d * h * h + 4 * b * d * d * h) as f64)
}

/// Seconds to run `flops` on a GPU clocked at `freq` with the given core layout.
pub fn layer_time(flops: f64, freq: f64, cores: u32, flops_per_cycle: u32) -> Result<f64> {
    check_compute_args(flops, freq, cores, flops_per_cycle)?;
    Ok(flops / (freq * f64::from(cores) * f64::from(flops_per_cycle)))
}

/// Joules to run `flops` under the cubic power model `κ·f³`.
pub fn layer_energy(
    flops: f64,
    freq: f64,
    cores: u32,
    flops_per_cycle: u32,
    kappa: f64,
) -> Result<f64> {
    check_compute_args(flops, freq, cores, flops_per_cycle)?;
    if !positive(kappa) {
        return Err(invalid!("power coefficient must be > 0, got {kappa}"));
    }
    Ok(kappa * freq * freq * flops / (f64::from(cores) * f64::from(flops_per_cycle)))
}

fn check_compute_args(flops: f64, freq: f64, cores: u32, flops_per_cycle: u32) -> Result<()> {
    if !(flops.is_finite() && flops >= 0.0) {
        return Err(invalid!("flops must be finite and >= 0, got {flops}"));
    }
    if !positive(freq) {
        return Err(invalid!("gpu frequency must be > 0, got {freq}"));
    }
    if cores == 0 || flops_per_cycle == 0 {
        return Err(invalid!("core count and flops per cycle must be >= 1"));
    }
    Ok(())
}

/// Shannon rate `b·log2(1 + g·p/(σ²·b))` in bits/s, with `σ²` a noise PSD in W/Hz.
pub fn link_rate(power: f64, bandwidth: f64, gain: f64, noise_psd: f64) -> Result<f64> {
    if !(power.is_finite() && power >= 0.0) {
        return Err(invalid!(
            "transmit power must be finite and >= 0, got {power}"
        ));
    }
    if !positive(bandwidth) {
        return Err(invalid!("bandwidth must be > 0, got {bandwidth}"));
    }
    if !positive(gain) || !positive(noise_psd) {
        return Err(invalid!(
            "gain and noise psd must be > 0 ({gain}, {noise_psd})"
        ));
    }
    Ok(rate_unchecked(power, bandwidth, gain, noise_psd))
}

#[inline]
pub(crate) fn rate_unchecked(power: f64, bandwidth: f64, gain: f64, noise_psd: f64) -> f64 {
    let snr = gain * power / (noise_psd * bandwidth);
    bandwidth * libm::log1p(snr) / LN_2
}

/// Uplink energy `p·payload/rate`.
pub fn comm_energy(power: f64, payload_bits: f64, rate: f64) -> Result<f64> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::InfeasibleLink(format!(
            "uplink rate must be > 0, got {rate}"
        )));
    }
    if !(power.is_finite() && power >= 0.0) || !(payload_bits.is_finite() && payload_bits >= 0.0) {
        return Err(invalid!(
            "power and payload must be finite and >= 0 ({power}, {payload_bits})"
        ));
    }
    Ok(power * payload_bits / rate)
}

/// Decision variables of the joint problem.
///
/// `rsu_freq[n]` is the clock share that vehicle `n`'s associated RSU
/// dedicates to it; shares of non-associated pairs are identically zero and
/// not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub layers: Vec<u32>,
    pub power: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub vehicle_freq: Vec<f64>,
    pub rsu_freq: Vec<f64>,
}

/// Tolerances for [`check_feasibility`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityTolerance {
    /// Relative slack on the per-RSU bandwidth and clock budgets.
    pub budget_rel: f64,
    /// Relative slack on the box bounds.
    pub bound_rel: f64,
}

impl Default for FeasibilityTolerance {
    fn default() -> Self {
        Self {
            budget_rel: 1e-6,
            bound_rel: 1e-9,
        }
    }
}

fn violation(constraint: Constraint, detail: alloc::string::String) -> Error {
    Error::Infeasible { constraint, detail }
}

/// Checks the layer-split, power, bandwidth and frequency constraints.
pub fn check_feasibility(scenario: &Scenario, alloc: &Allocation) -> Result<()> {
    check_feasibility_with(scenario, alloc, FeasibilityTolerance::default())
}

pub fn check_feasibility_with(
    scenario: &Scenario,
    alloc: &Allocation,
    tol: FeasibilityTolerance,
) -> Result<()> {
    let n = scenario.vehicle_count();
    let lens = [
        alloc.layers.len(),
        alloc.power.len(),
        alloc.bandwidth.len(),
        alloc.vehicle_freq.len(),
        alloc.rsu_freq.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(violation(
            Constraint::Shape,
            format!("expected {n} entries per vector, got {lens:?}"),
        ));
    }
    let upsilon = scenario.llm.layer_count;
    for (i, v) in scenario.vehicles.iter().enumerate() {
        let hw = &v.hardware;
        let layers = alloc.layers[i];
        if layers < 1 || layers > upsilon {
            return Err(violation(
                Constraint::LayerSplit,
                format!("vehicle {i}: {layers} not in 1..={upsilon}"),
            ));
        }
        let p = alloc.power[i];
        if !p.is_finite() || p < 0.0 || p > hw.p_max * (1.0 + tol.bound_rel) {
            return Err(violation(
                Constraint::TransmitPower,
                format!("vehicle {i}: {p} W outside [0, {}]", hw.p_max),
            ));
        }
        let b = alloc.bandwidth[i];
        if !b.is_finite() || b <= 0.0 {
            return Err(violation(
                Constraint::Bandwidth,
                format!("vehicle {i}: bandwidth share {b} Hz must be positive"),
            ));
        }
        let f = alloc.vehicle_freq[i];
        if !f.is_finite() || f <= 0.0 || f > hw.f_max * (1.0 + tol.bound_rel) {
            return Err(violation(
                Constraint::VehicleFrequency,
                format!("vehicle {i}: {f} Hz outside (0, {}]", hw.f_max),
            ));
        }
        let fr = alloc.rsu_freq[i];
        if !fr.is_finite() || fr <= 0.0 {
            return Err(violation(
                Constraint::RsuFrequency,
                format!("vehicle {i}: rsu clock share {fr} Hz must be positive"),
            ));
        }
    }
    for (m, rsu) in scenario.rsus.iter().enumerate() {
        let members = scenario.members(m);
        if members.is_empty() {
            continue;
        }
        let b_sum: f64 = members.iter().map(|&i| alloc.bandwidth[i]).sum();
        if (b_sum - rsu.hardware.b_max).abs() > tol.budget_rel * rsu.hardware.b_max {
            return Err(violation(
                Constraint::Bandwidth,
                format!(
                    "rsu {m}: shares sum to {b_sum} Hz, budget {}",
                    rsu.hardware.b_max
                ),
            ));
        }
        let f_sum: f64 = members.iter().map(|&i| alloc.rsu_freq[i]).sum();
        if (f_sum - rsu.hardware.f_max).abs() > tol.budget_rel * rsu.hardware.f_max {
            return Err(violation(
                Constraint::RsuFrequency,
                format!(
                    "rsu {m}: shares sum to {f_sum} Hz, clock {}",
                    rsu.hardware.f_max
                ),
            ));
        }
    }
    Ok(())
}

/// Raw per-vehicle terms; times in seconds, energies in joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleCost {
    /// `α_n·T_n`, all local layers.
    pub local_time: f64,
    /// `α_n·E_n`.
    pub local_energy: f64,
    pub comm_energy: f64,
}

/// Raw per-RSU terms summed over its vehicles' offloaded layers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RsuCost {
    pub remote_time: f64,
    pub remote_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub vehicles: Vec<VehicleCost>,
    pub rsus: Vec<RsuCost>,
    /// Mixed seconds/joules objective; no unit normalisation is applied.
    pub weighted_total: f64,
}

impl CostBreakdown {
    /// Recomputes the weighted objective from the raw components.
    pub fn reweighted(&self, weights: Weights) -> f64 {
        let (wt, we) = (weights.time(), weights.energy());
        let vehicles: f64 = self
            .vehicles
            .iter()
            .map(|v| wt * v.local_time + we * v.local_energy + we * v.comm_energy)
            .sum();
        let rsus: f64 = self
            .rsus
            .iter()
            .map(|r| wt * r.remote_time + we * r.remote_energy)
            .sum();
        vehicles + rsus
    }

    /// Sum of local and remote compute time (transmission excluded).
    pub fn compute_time(&self) -> f64 {
        self.vehicles.iter().map(|v| v.local_time).sum::<f64>()
            + self.rsus.iter().map(|r| r.remote_time).sum::<f64>()
    }

    pub fn comm_energy(&self) -> f64 {
        self.vehicles.iter().map(|v| v.comm_energy).sum()
    }

    /// Local, uplink and remote energy together.
    pub fn total_energy(&self) -> f64 {
        self.vehicles
            .iter()
            .map(|v| v.local_energy + v.comm_energy)
            .sum::<f64>()
            + self.rsus.iter().map(|r| r.remote_energy).sum::<f64>()
    }
}

/// Per-layer compute terms of one vehicle and its associated RSU.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerTerms {
    pub local_time: f64,
    pub local_energy: f64,
    pub remote_time: f64,
    pub remote_energy: f64,
}

pub(crate) fn layer_terms(
    scenario: &Scenario,
    vehicle: usize,
    freq: f64,
    rsu_freq: f64,
) -> Result<LayerTerms> {
    let v = &scenario.vehicles[vehicle];
    let r = &scenario.rsus[scenario.association[vehicle]].hardware;
    let flops = scenario.flops(vehicle)?;
    let hw = &v.hardware;
    Ok(LayerTerms {
        local_time: layer_time(flops, freq, hw.cores, hw.flops_per_cycle)?,
        local_energy: layer_energy(flops, freq, hw.cores, hw.flops_per_cycle, hw.kappa)?,
        remote_time: layer_time(flops, rsu_freq, r.cores, r.flops_per_cycle)?,
        remote_energy: layer_energy(flops, rsu_freq, r.cores, r.flops_per_cycle, r.kappa)?,
    })
}

/// Evaluates the full weighted delay/energy objective of an allocation.
pub fn total_cost(
    scenario: &Scenario,
    alloc: &Allocation,
    weights: Weights,
) -> Result<CostBreakdown> {
    check_feasibility(scenario, alloc)?;
    let upsilon = f64::from(scenario.llm.layer_count);
    let mut vehicles = Vec::with_capacity(scenario.vehicle_count());
    let mut rsus = alloc::vec![RsuCost::default(); scenario.rsu_count()];
    for i in 0..scenario.vehicle_count() {
        let terms = layer_terms(scenario, i, alloc.vehicle_freq[i], alloc.rsu_freq[i])?;
        let local = f64::from(alloc.layers[i]);
        let remote = upsilon - local;
        let rate = scenario.uplink_rate(i, alloc.power[i], alloc.bandwidth[i])?;
        let comm = if scenario.vehicles[i].payload_bits == 0.0 {
            0.0
        } else {
            comm_energy(alloc.power[i], scenario.vehicles[i].payload_bits, rate)?
        };
        vehicles.push(VehicleCost {
            local_time: local * terms.local_time,
            local_energy: local * terms.local_energy,
            comm_energy: comm,
        });
        let rsu = &mut rsus[scenario.association[i]];
        rsu.remote_time += remote * terms.remote_time;
        rsu.remote_energy += remote * terms.remote_energy;
    }
    let mut breakdown = CostBreakdown {
        vehicles,
        rsus,
        weighted_total: 0.0,
    };
    breakdown.weighted_total = breakdown.reweighted(weights);
    Ok(breakdown)
}
