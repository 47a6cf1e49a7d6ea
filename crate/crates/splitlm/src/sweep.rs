//! ω_t sweeps over seeds and methods.
//!
//! Results CSV columns, one row per `(wt, seed, method)` sorted in that
//! order:
//!
//! | column | meaning |
//! |---|---|
//! | `wt` | delay weight ω_t (ω_e = 1 − ω_t) |
//! | `seed` | scenario seed |
//! | `method` | `proposed`, `rlor` or `rrol` |
//! | `weighted_total` | objective value |
//! | `objective_time_s` | local plus remote compute time summed over vehicles |
//! | `end_to_end_s` | mean per-vehicle latency including the uplink |
//! | `energy_J` | local, uplink and remote energy |
//! | `ao_iters` | alternating rounds (0 for baselines) |
//! | `wall_ms` | solve wall time |
//! | `status` | `ok`, `not-converged` or `error: ...` |
//!
//! Floats carry 17 significant digits. Failed rows leave the numeric
//! columns empty. The aggregated CSV has one row per `(wt, method)` with
//! the means over successful rows and their count `n`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use splitlm_core::ao::AoOptions;
use splitlm_core::scenario::generate_scenario;
use splitlm_core::{Scenario, ScenarioParams};

use crate::io::fmt_f64;
use crate::run::{solve_method, Method, SolveReport};
use crate::{Error, Result};

pub const RESULT_COLUMNS: [&str; 10] = [
    "wt",
    "seed",
    "method",
    "weighted_total",
    "objective_time_s",
    "end_to_end_s",
    "energy_J",
    "ao_iters",
    "wall_ms",
    "status",
];

pub const AGGREGATE_COLUMNS: [&str; 8] = [
    "wt",
    "method",
    "n",
    "weighted_total",
    "objective_time_s",
    "end_to_end_s",
    "energy_J",
    "ao_iters",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Delay weights; the energy weight is always `1 - wt`.
    pub weights_time: Vec<f64>,
    /// Scenario seeds; `params.seed` is ignored.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub params: ScenarioParams,
    /// Mixed with each scenario seed to seed the random baselines.
    pub baseline_seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            weights_time: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            seeds: (0..10).collect(),
            methods: Method::ALL.to_vec(),
            params: ScenarioParams::default(),
            baseline_seed: 0,
            output_dir: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(wt) = self.weights_time.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Config(format!("weight {wt} outside [0, 1]")));
        }
        if self.weights_time.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::Config(
                "weights, seeds and methods must be non-empty".into(),
            ));
        }
        self.params.validate()?;
        Ok(())
    }

    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let params = ScenarioParams {
            seed,
            ..self.params.clone()
        };
        Ok(generate_scenario(&params)?)
    }
}

/// Seed handed to the random baselines for a scenario seed.
pub fn row_seed(baseline_seed: u64, seed: u64) -> u64 {
    baseline_seed ^ seed.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub wt: f64,
    pub seed: u64,
    pub method: Method,
    /// `Err` holds the failure message.
    pub outcome: std::result::Result<RowValues, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowValues {
    pub weighted_total: f64,
    pub objective_time_s: f64,
    pub end_to_end_s: f64,
    pub energy_j: f64,
    pub ao_iters: usize,
    pub wall_ms: f64,
    pub converged: bool,
}

impl RowValues {
    fn from_report(r: &SolveReport) -> Self {
        Self {
            weighted_total: r.cost.weighted_total,
            objective_time_s: r.completion.objective_time,
            end_to_end_s: r.completion.end_to_end,
            energy_j: r.cost.total_energy(),
            ao_iters: r.ao_rounds(),
            wall_ms: r.wall_ms,
            converged: r.converged,
        }
    }
}

impl SweepRow {
    pub fn from_report(seed: u64, report: &SolveReport) -> Self {
        Self {
            wt: report.weight_time,
            seed,
            method: report.method,
            outcome: Ok(RowValues::from_report(report)),
        }
    }

    pub fn status(&self) -> String {
        match &self.outcome {
            Ok(v) if v.converged => "ok".into(),
            Ok(_) => "not-converged".into(),
            Err(e) => format!("error: {e}"),
        }
    }

    fn record(&self) -> Vec<String> {
        let mut rec = vec![
            fmt_f64(self.wt),
            self.seed.to_string(),
            self.method.to_string(),
        ];
        match &self.outcome {
            Ok(v) => rec.extend([
                fmt_f64(v.weighted_total),
                fmt_f64(v.objective_time_s),
                fmt_f64(v.end_to_end_s),
                fmt_f64(v.energy_j),
                v.ao_iters.to_string(),
                fmt_f64(v.wall_ms),
            ]),
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.push(self.status());
        rec
    }
}

/// Runs every `(wt, seed, method)` combination on the current rayon pool.
/// Rows come back sorted by `(wt, seed, method)` whatever the schedule.
pub fn run_sweep(config: &SweepConfig, options: &AoOptions) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let scenarios: BTreeMap<u64, std::result::Result<Scenario, String>> = seeds
        .par_iter()
        .map(|&s| (s, config.scenario(s).map_err(|e| e.to_string())))
        .collect();
    let mut wts = config.weights_time.clone();
    wts.sort_by(f64::total_cmp);
    wts.dedup();
    let mut methods = config.methods.clone();
    methods.sort_unstable();
    methods.dedup();

    let jobs: Vec<(f64, u64, Method)> = wts
        .iter()
        .flat_map(|&wt| {
            let methods = &methods;
            seeds
                .iter()
                .flat_map(move |&seed| methods.iter().map(move |&m| (wt, seed, m)))
        })
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(wt, seed, method)| {
            let outcome = match &scenarios[&seed] {
                Ok(s) => solve_method(s, wt, method, row_seed(config.baseline_seed, seed), options)
                    .map(|r| RowValues::from_report(&r))
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            SweepRow {
                wt,
                seed,
                method,
                outcome,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub wt: f64,
    pub method: Method,
    pub n: usize,
    pub weighted_total: f64,
    pub objective_time_s: f64,
    pub end_to_end_s: f64,
    pub energy_j: f64,
    pub ao_iters: f64,
}

/// Per-`(wt, method)` means over rows that produced an allocation.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(u64, Method), Vec<RowValues>> = BTreeMap::new();
    for row in rows {
        let entry = groups.entry((row.wt.to_bits(), row.method)).or_default();
        if let Ok(v) = row.outcome {
            entry.push(v);
        }
    }
    let mut out: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((wt, method), vals)| {
            let n = vals.len();
            let mean = |f: fn(&RowValues) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    vals.iter().map(f).sum::<f64>() / n as f64
                }
            };
            AggregateRow {
                wt: f64::from_bits(wt),
                method,
                n,
                weighted_total: mean(|v| v.weighted_total),
                objective_time_s: mean(|v| v.objective_time_s),
                end_to_end_s: mean(|v| v.end_to_end_s),
                energy_j: mean(|v| v.energy_j),
                ao_iters: mean(|v| v.ao_iters as f64),
            }
        })
        .collect();
    out.sort_by(|a, b| a.wt.total_cmp(&b.wt).then(a.method.cmp(&b.method)));
    out
}

/// Share of rows that produced an allocation.
pub fn success_fraction(rows: &[SweepRow]) -> f64 {
    if rows.is_empty() {
        return 1.0;
    }
    rows.iter().filter(|r| r.outcome.is_ok()).count() as f64 / rows.len() as f64
}

pub fn write_results_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    flush(w, path)
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.write_record([
            fmt_f64(r.wt),
            r.method.to_string(),
            r.n.to_string(),
            fmt_f64(r.weighted_total),
            fmt_f64(r.objective_time_s),
            fmt_f64(r.end_to_end_s),
            fmt_f64(r.energy_j),
            fmt_f64(r.ao_iters),
        ])?;
    }
    flush(w, path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.to_owned(),
            source,
        })?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::File {
        path: path.to_owned(),
        source,
    })
}
