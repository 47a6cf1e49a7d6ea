//! Split LLM inference between vehicles and roadside units: cost model,
//! instance generation, and the alternating optimizer over layer splits,
//! transmit power, bandwidth and GPU frequencies.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, the CLI and
//! thread pools live in the companion `splitlm` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod ao;
pub mod baseline;
pub mod diagnostics;
pub mod error;
pub mod fractional;
pub mod metrics;
pub mod model;
mod nlp;
pub mod oracle;
pub mod qp;
pub mod scenario;
pub mod sqp;

pub use ao::{alternating_optimize, AoOptions, AoTrace};
pub use baseline::{baseline_allocate, BaselineKind};
pub use error::{Constraint, Error, Result};
pub use metrics::{completion_time_metric, CompletionTime};
pub use model::{Allocation, CostBreakdown, LlmProfile, RsuHardware, VehicleHardware, Weights};
pub use oracle::{brute_force_oracle, GridSpec};
pub use scenario::{Scenario, ScenarioParams};
