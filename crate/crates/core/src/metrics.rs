//! Completion-time figures reported next to the weighted objective.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{layer_terms, total_cost, Allocation, Weights};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionTime {
    /// Local plus remote compute time summed over vehicles, the delay part
    /// of the objective, s.
    pub objective_time: f64,
    /// Mean per-vehicle latency including the uplink transfer, s.
    pub end_to_end: f64,
}

pub fn completion_time_metric(scenario: &Scenario, alloc: &Allocation) -> Result<CompletionTime> {
    // Validates the allocation; the weights are irrelevant here.
    let breakdown = total_cost(scenario, alloc, Weights::from_time(1.0)?)?;
    let upsilon = f64::from(scenario.llm.layer_count);
    let n = scenario.vehicle_count();
    let mut latency = 0.0;
    for i in 0..n {
        let terms = layer_terms(scenario, i, alloc.vehicle_freq[i], alloc.rsu_freq[i])?;
        let local = f64::from(alloc.layers[i]);
        let rate = scenario.uplink_rate(i, alloc.power[i], alloc.bandwidth[i])?;
        latency += local * terms.local_time
            + scenario.vehicles[i].payload_bits / rate
            + (upsilon - local) * terms.remote_time;
    }
    Ok(CompletionTime {
        objective_time: breakdown.compute_time(),
        end_to_end: latency / n as f64,
    })
}
