//! Problem instances: geometry, path loss with log-normal shadowing,
//! strongest-gain association, and the hardware/LLM constants.

use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{self, LlmProfile, RsuHardware, VehicleHardware};

/// How many bits cross the uplink at the split point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PayloadMode {
    /// `B·d·h` activations at `bits_per_value` bits each.
    Activations { bits_per_value: u32 },
    /// One bit per input token; reproduces the literal reading of the model
    /// where the token count doubles as the data size.
    TokenCount,
}

impl Default for PayloadMode {
    fn default() -> Self {
        PayloadMode::Activations { bits_per_value: 16 }
    }
}

impl PayloadMode {
    pub fn payload_bits(&self, token_count: u32, llm: &LlmProfile) -> f64 {
        match *self {
            PayloadMode::Activations { bits_per_value } => {
                f64::from(llm.batch_size)
                    * f64::from(token_count)
                    * f64::from(llm.hidden_size)
                    * f64::from(bits_per_value)
            }
            PayloadMode::TokenCount => f64::from(token_count),
        }
    }
}

/// `-134 dBm/Hz` expressed in W/Hz.
pub const DEFAULT_NOISE_PSD: f64 = 3.981_071_705_534_985_5e-17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub arena_side_m: f64,
    pub vehicles: usize,
    pub rsus: usize,
    /// Inclusive range of per-vehicle input lengths.
    pub token_min: u32,
    pub token_max: u32,
    pub llm: LlmProfile,
    pub vehicle_hardware: VehicleHardware,
    pub rsu_hardware: RsuHardware,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Standard deviation of the log-normal shadowing, dB.
    pub shadow_std_db: f64,
    pub payload: PayloadMode,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            arena_side_m: 1000.0,
            vehicles: 20,
            rsus: 5,
            token_min: 128,
            token_max: 1024,
            llm: LlmProfile::default(),
            vehicle_hardware: VehicleHardware::default(),
            rsu_hardware: RsuHardware::default(),
            noise_psd: DEFAULT_NOISE_PSD,
            shadow_std_db: 8.0,
            payload: PayloadMode::default(),
            seed: 0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.vehicles == 0 || self.rsus == 0 {
            return Err(invalid!(
                "need at least one vehicle and one rsu (got {} and {})",
                self.vehicles,
                self.rsus
            ));
        }
        if !(self.arena_side_m.is_finite() && self.arena_side_m > 0.0) {
            return Err(invalid!(
                "arena side must be > 0, got {}",
                self.arena_side_m
            ));
        }
        if self.token_min == 0 || self.token_min > self.token_max {
            return Err(invalid!(
                "token range must satisfy 1 <= min <= max (got {}..={})",
                self.token_min,
                self.token_max
            ));
        }
        if !(self.noise_psd.is_finite() && self.noise_psd > 0.0) {
            return Err(invalid!("noise psd must be > 0, got {}", self.noise_psd));
        }
        if !(self.shadow_std_db.is_finite() && self.shadow_std_db >= 0.0) {
            return Err(invalid!(
                "shadow std must be >= 0, got {}",
                self.shadow_std_db
            ));
        }
        if let PayloadMode::Activations { bits_per_value: 0 } = self.payload {
            return Err(invalid!("bits per activation must be >= 1"));
        }
        self.llm.validate()?;
        self.vehicle_hardware.validate()?;
        self.rsu_hardware.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Metres, inside the square arena.
    pub position: [f64; 2],
    pub token_count: u32,
    pub payload_bits: f64,
    pub hardware: VehicleHardware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuState {
    pub position: [f64; 2],
    pub hardware: RsuHardware,
}

/// A full problem instance. `association[n]` is the index of the RSU that
/// serves vehicle `n`; `gains[n][m]` is the linear channel gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub params: ScenarioParams,
    pub vehicles: Vec<VehicleState>,
    pub rsus: Vec<RsuState>,
    pub gains: Vec<Vec<f64>>,
    pub association: Vec<usize>,
    pub llm: LlmProfile,
    pub seed: u64,
}

impl Scenario {
    /// Assembles and validates a hand-built instance.
    pub fn new(
        params: ScenarioParams,
        vehicles: Vec<VehicleState>,
        rsus: Vec<RsuState>,
        gains: Vec<Vec<f64>>,
        association: Vec<usize>,
    ) -> Result<Self> {
        let scenario = Self {
            llm: params.llm,
            seed: params.seed,
            params,
            vehicles,
            rsus,
            gains,
            association,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.vehicles.len(), self.rsus.len());
        if n == 0 || m == 0 {
            return Err(invalid!("scenario needs vehicles and rsus (got {n}, {m})"));
        }
        self.llm.validate()?;
        if !(self.params.noise_psd.is_finite() && self.params.noise_psd > 0.0) {
            return Err(invalid!("noise psd must be > 0"));
        }
        if self.gains.len() != n || self.gains.iter().any(|row| row.len() != m) {
            return Err(invalid!("gain matrix must be {n}x{m}"));
        }
        if self
            .gains
            .iter()
            .flatten()
            .any(|&g| !(g.is_finite() && g > 0.0))
        {
            return Err(invalid!("channel gains must be finite and > 0"));
        }
        if self.association.len() != n {
            return Err(invalid!("association must list one rsu per vehicle"));
        }
        if let Some(&bad) = self.association.iter().find(|&&a| a >= m) {
            return Err(invalid!("association refers to rsu {bad}, only {m} exist"));
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.token_count == 0 {
                return Err(invalid!("vehicle {i}: token count must be >= 1"));
            }
            if !(v.payload_bits.is_finite() && v.payload_bits >= 1.0) {
                return Err(invalid!("vehicle {i}: payload must be >= 1 bit"));
            }
            v.hardware.validate()?;
        }
        for r in &self.rsus {
            r.hardware.validate()?;
        }
        Ok(())
    }

    #[inline]
    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }

    #[inline]
    pub fn rsu_count(&self) -> usize {
        self.rsus.len()
    }

    #[inline]
    pub fn noise_psd(&self) -> f64 {
        self.params.noise_psd
    }

    /// Gain of vehicle `n` towards its serving RSU.
    #[inline]
    pub fn serving_gain(&self, n: usize) -> f64 {
        self.gains[n][self.association[n]]
    }

    /// Vehicles served by RSU `m`, in index order.
    pub fn members(&self, m: usize) -> Vec<usize> {
        self.association
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == m)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-layer forward FLOPs for vehicle `n`.
    pub fn flops(&self, n: usize) -> Result<f64> {
        model::flops_per_layer(self.vehicles[n].token_count, &self.llm)
    }

    /// Rate of vehicle `n` on its associated link.
    pub fn uplink_rate(&self, n: usize, power: f64, bandwidth: f64) -> Result<f64> {
        model::link_rate(power, bandwidth, self.serving_gain(n), self.noise_psd())
    }
}

/// Linear gain for the `128.1 + 37.6·log10(d_km)` path loss plus shadowing.
pub fn channel_gain(distance_m: f64, shadow_db: f64) -> Result<f64> {
    if !(distance_m.is_finite() && distance_m > 0.0) {
        return Err(invalid!("distance must be > 0, got {distance_m}"));
    }
    if !shadow_db.is_finite() {
        return Err(invalid!("shadowing must be finite"));
    }
    let loss_db = 128.1 + 37.6 * libm::log10(distance_m / 1000.0) + shadow_db;
    Ok(libm::pow(10.0, -loss_db / 10.0))
}

/// Maps every vehicle to its strongest RSU; ties go to the lowest index.
pub fn associate(gains: &[Vec<f64>]) -> Result<Vec<usize>> {
    gains
        .iter()
        .enumerate()
        .map(|(n, row)| {
            let mut best: Option<(usize, f64)> = None;
            for (m, &g) in row.iter().enumerate() {
                if best.is_none_or(|(_, bg)| g > bg) {
                    best = Some((m, g));
                }
            }
            best.map(|(m, _)| m)
                .ok_or_else(|| invalid!("vehicle {n}: no rsu to associate with"))
        })
        .collect()
}

/// Minimum vehicle-RSU separation used in the path-loss formula.
const MIN_DISTANCE_M: f64 = 1.0;

/// Samples a scenario; identical parameters (including the seed) give a
/// bit-identical result.
pub fn generate_scenario(params: &ScenarioParams) -> Result<Scenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let side = params.arena_side_m;
    let mut vehicles = Vec::with_capacity(params.vehicles);
    for _ in 0..params.vehicles {
        let position = [rng.random_range(0.0..=side), rng.random_range(0.0..=side)];
        let token_count = rng.random_range(params.token_min..=params.token_max);
        vehicles.push(VehicleState {
            position,
            token_count,
            payload_bits: params.payload.payload_bits(token_count, &params.llm),
            hardware: params.vehicle_hardware,
        });
    }
    let rsus: Vec<RsuState> = (0..params.rsus)
        .map(|_| RsuState {
            position: [rng.random_range(0.0..=side), rng.random_range(0.0..=side)],
            hardware: params.rsu_hardware,
        })
        .collect();
    let mut gains = Vec::with_capacity(params.vehicles);
    for v in &vehicles {
        let mut row = Vec::with_capacity(params.rsus);
        for r in &rsus {
            let dx = v.position[0] - r.position[0];
            let dy = v.position[1] - r.position[1];
            let distance = libm::hypot(dx, dy).max(MIN_DISTANCE_M);
            let z: f64 = StandardNormal.sample(&mut rng);
            row.push(channel_gain(distance, params.shadow_std_db * z)?);
        }
        gains.push(row);
    }
    let association = associate(&gains)?;
    Scenario::new(params.clone(), vehicles, rsus, gains, association)
}
