use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Constraint families of the joint allocation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    /// Allocation vectors do not match the scenario dimensions.
    Shape,
    /// Layer split must be an integer in `1..=layer_count`.
    LayerSplit,
    /// Transmit power in `[0, p_max]`.
    TransmitPower,
    /// Per-RSU bandwidth shares sum to the RSU budget.
    Bandwidth,
    /// Vehicle GPU frequency in `(0, f_max]`.
    VehicleFrequency,
    /// Per-RSU frequency shares sum to the RSU clock.
    RsuFrequency,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Constraint::Shape => "shape",
            Constraint::LayerSplit => "layer-split range",
            Constraint::TransmitPower => "transmit-power bound",
            Constraint::Bandwidth => "rsu bandwidth budget",
            Constraint::VehicleFrequency => "vehicle frequency bound",
            Constraint::RsuFrequency => "rsu frequency budget",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible link: {0}")]
    InfeasibleLink(String),
    #[error("allocation violates {constraint}: {detail}")]
    Infeasible {
        constraint: Constraint,
        detail: String,
    },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("search budget exceeded: {required:.3e} evaluations requested, limit {limit:.3e}")]
    BudgetExceeded { required: f64, limit: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
