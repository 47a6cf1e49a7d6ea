//! Exhaustive grid search for tiny instances.
//!
//! Power, vehicle clocks and the per-RSU bandwidth and clock shares are
//! gridded; shares live on the simplex `{n/G : n ≥ 1, Σ n = G}`. The uplink
//! energy depends only on `(p, b)` and the compute cost only on
//! `(α, f^V, f^R)` per vehicle, so the minimum over the full product grid is
//! found from per-vehicle tables and an enumeration of share compositions.
//! Doubling `G` keeps every point of the coarser grid.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{comm_energy, layer_terms, total_cost, Allocation, Weights};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Grid points per resource dimension (`G`).
    pub points: usize,
    /// Refuse searches needing more objective evaluations than this.
    pub budget: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 20,
            budget: 1e8,
        }
    }
}

/// Objective evaluations [`brute_force_oracle`] would perform.
pub fn oracle_cost(scenario: &Scenario, grid: &GridSpec) -> f64 {
    let g = grid.points as f64;
    let upsilon = f64::from(scenario.llm.layer_count);
    (0..scenario.rsu_count())
        .map(|m| scenario.members(m).len())
        .filter(|&k| k > 0)
        .map(|k| {
            let k_f = k as f64;
            let tables = k_f * g * g * (1.0 + upsilon);
            tables + 2.0 * k_f * compositions(grid.points, k)
        })
        .sum()
}

/// Number of ways to write `g` as an ordered sum of `k` positive parts.
fn compositions(g: usize, k: usize) -> f64 {
    if k == 0 || k > g {
        return 0.0;
    }
    let (n, r) = ((g - 1) as f64, (k - 1) as f64);
    let mut c = 1.0;
    for i in 0..(k - 1) {
        c *= (n - i as f64) / (r - i as f64);
    }
    c
}

/// Calls `visit` with every composition of `g` into `k` positive parts.
fn for_each_composition(g: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(rest: usize, slots: usize, parts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if slots == 1 {
            parts.push(rest);
            visit(parts);
            parts.pop();
            return;
        }
        for n in 1..=(rest - (slots - 1)) {
            parts.push(n);
            rec(rest - n, slots - 1, parts, visit);
            parts.pop();
        }
    }
    if k > 0 && k <= g {
        rec(g, k, &mut Vec::with_capacity(k), visit);
    }
}

/// Best grid allocation and its weighted total.
pub fn brute_force_oracle(
    scenario: &Scenario,
    weights: Weights,
    grid: &GridSpec,
) -> Result<(Allocation, f64)> {
    scenario.validate()?;
    let g = grid.points;
    if g < 1 {
        return Err(invalid!("grid needs at least one point"));
    }
    let required = oracle_cost(scenario, grid);
    if required > grid.budget {
        return Err(Error::BudgetExceeded {
            required,
            limit: grid.budget,
        });
    }
    let n = scenario.vehicle_count();
    let upsilon = scenario.llm.layer_count;
    let (wt, we) = (weights.time(), weights.energy());
    let level = |j: usize| j as f64 / g as f64;
    let mut alloc = Allocation {
        layers: vec![1; n],
        power: vec![0.0; n],
        bandwidth: vec![0.0; n],
        vehicle_freq: vec![0.0; n],
        rsu_freq: vec![0.0; n],
    };

    for m in 0..scenario.rsu_count() {
        let members = scenario.members(m);
        let k = members.len();
        if k == 0 {
            continue;
        }
        if k > g {
            return Err(invalid!(
                "rsu {m} serves {k} vehicles but the grid has {g} share levels"
            ));
        }
        let hw = scenario.rsus[m].hardware;
        // comm[v][s]: best (energy, power) at bandwidth share level s.
        // comp[v][s]: best (cost, split, clock) at rsu clock share level s.
        let mut comm = vec![vec![(f64::INFINITY, 0.0); g + 1]; k];
        let mut comp = vec![vec![(f64::INFINITY, 1u32, 0.0); g + 1]; k];
        for (v, &i) in members.iter().enumerate() {
            let vh = scenario.vehicles[i].hardware;
            for s in 1..=g {
                let b = hw.b_max * level(s);
                for j in 1..=g {
                    let p = vh.p_max * level(j);
                    let rate = scenario.uplink_rate(i, p, b)?;
                    let e = we * comm_energy(p, scenario.vehicles[i].payload_bits, rate)?;
                    if e < comm[v][s].0 {
                        comm[v][s] = (e, p);
                    }
                }
                let fr = hw.f_max * level(s);
                for j in 1..=g {
                    let f = vh.f_max * level(j);
                    let t = layer_terms(scenario, i, f, fr)?;
                    let local = wt * t.local_time + we * t.local_energy;
                    let remote = wt * t.remote_time + we * t.remote_energy;
                    for a in 1..=upsilon {
                        let cost = f64::from(a) * local + f64::from(upsilon - a) * remote;
                        if cost < comp[v][s].0 {
                            comp[v][s] = (cost, a, f);
                        }
                    }
                }
            }
        }
        let mut best_b = (f64::INFINITY, vec![0; k]);
        let mut best_f = (f64::INFINITY, vec![0; k]);
        for_each_composition(g, k, &mut |parts| {
            let cb: f64 = parts.iter().enumerate().map(|(v, &s)| comm[v][s].0).sum();
            if cb < best_b.0 {
                best_b = (cb, parts.to_vec());
            }
            let cf: f64 = parts.iter().enumerate().map(|(v, &s)| comp[v][s].0).sum();
            if cf < best_f.0 {
                best_f = (cf, parts.to_vec());
            }
        });
        for (v, &i) in members.iter().enumerate() {
            let sb = best_b.1[v];
            let sf = best_f.1[v];
            alloc.bandwidth[i] = hw.b_max * level(sb);
            alloc.power[i] = comm[v][sb].1;
            alloc.rsu_freq[i] = hw.f_max * level(sf);
            alloc.layers[i] = comp[v][sf].1;
            alloc.vehicle_freq[i] = comp[v][sf].2;
        }
    }
    let total = total_cost(scenario, &alloc, weights)?.weighted_total;
    Ok((alloc, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_feasibility, LlmProfile};
    use crate::scenario::{generate_scenario, ScenarioParams};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(vehicles: usize, layers: u32, seed: u64) -> Scenario {
        let mut params = ScenarioParams {
            vehicles,
            rsus: 1,
            seed,
            ..ScenarioParams::default()
        };
        params.llm =
            LlmProfile::new(params.llm.hidden_size, layers, params.llm.batch_size).unwrap();
        generate_scenario(&params).unwrap()
    }

    #[test]
    fn composition_count_matches_enumeration() {
        for (g, k) in [(5, 1), (5, 2), (7, 3), (10, 4), (3, 4)] {
            let mut count = 0;
            for_each_composition(g, k, &mut |parts| {
                assert_eq!(parts.iter().sum::<usize>(), g);
                assert!(parts.iter().all(|&p| p >= 1));
                count += 1;
            });
            assert_eq!(count as f64, compositions(g, k));
        }
    }

    #[test]
    fn no_grid_probe_beats_the_oracle() {
        let s = tiny(1, 2, 3);
        let w = Weights::from_time(0.5).unwrap();
        let grid = GridSpec {
            points: 50,
            ..GridSpec::default()
        };
        let (a, best) = brute_force_oracle(&s, w, &grid).unwrap();
        check_feasibility(&s, &a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hw = s.vehicles[0].hardware;
        for _ in 0..500 {
            let probe = Allocation {
                layers: vec![rng.random_range(1..=2)],
                power: vec![hw.p_max * f64::from(rng.random_range(1..=50u32)) / 50.0],
                bandwidth: vec![s.rsus[0].hardware.b_max],
                vehicle_freq: vec![hw.f_max * f64::from(rng.random_range(1..=50u32)) / 50.0],
                rsu_freq: vec![s.rsus[0].hardware.f_max],
            };
            let c = total_cost(&s, &probe, w).unwrap().weighted_total;
            assert!(best <= c * (1.0 + 1e-12), "{best} > {c}");
        }
        // Enumerating the split by hand at the oracle's resources.
        for layers in 1..=2 {
            let mut b = a.clone();
            b.layers[0] = layers;
            assert!(best <= total_cost(&s, &b, w).unwrap().weighted_total);
        }
    }

    #[test]
    fn refining_never_hurts() {
        for seed in 0..3 {
            let s = tiny(2, 4, seed);
            let w = Weights::from_time(0.4).unwrap();
            let (_, coarse) = brute_force_oracle(
                &s,
                w,
                &GridSpec {
                    points: 10,
                    ..GridSpec::default()
                },
            )
            .unwrap();
            let (_, fine) = brute_force_oracle(
                &s,
                w,
                &GridSpec {
                    points: 20,
                    ..GridSpec::default()
                },
            )
            .unwrap();
            assert!(fine <= coarse * (1.0 + 1e-12));
        }
    }

    #[test]
    fn refuses_oversized_searches() {
        let s = tiny(2, 4, 0);
        let grid = GridSpec {
            points: 20,
            budget: 10.0,
        };
        let err = brute_force_oracle(&s, Weights::from_time(0.5).unwrap(), &grid).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn matches_naive_product_grid_on_two_vehicles() {
        let s = tiny(2, 2, 6);
        let w = Weights::from_time(0.6).unwrap();
        let g = 4;
        let (_, fast) = brute_force_oracle(
            &s,
            w,
            &GridSpec {
                points: g,
                ..GridSpec::default()
            },
        )
        .unwrap();
        let hw = s.rsus[0].hardware;
        let vh: Vec<_> = s.vehicles.iter().map(|v| v.hardware).collect();
        let lv = |j: usize| j as f64 / g as f64;
        let mut naive = f64::INFINITY;
        for a0 in 1..=2 {
            for a1 in 1..=2 {
                for sb in 1..g {
                    for sf in 1..g {
                        for p0 in 1..=g {
                            for p1 in 1..=g {
                                for f0 in 1..=g {
                                    for f1 in 1..=g {
                                        let alloc = Allocation {
                                            layers: vec![a0, a1],
                                            power: vec![vh[0].p_max * lv(p0), vh[1].p_max * lv(p1)],
                                            bandwidth: vec![
                                                hw.b_max * lv(sb),
                                                hw.b_max * lv(g - sb),
                                            ],
                                            vehicle_freq: vec![
                                                vh[0].f_max * lv(f0),
                                                vh[1].f_max * lv(f1),
                                            ],
                                            rsu_freq: vec![
                                                hw.f_max * lv(sf),
                                                hw.f_max * lv(g - sf),
                                            ],
                                        };
                                        naive = naive
                                            .min(total_cost(&s, &alloc, w).unwrap().weighted_total);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert!((fast - naive).abs() <= 1e-12 * naive, "{fast} vs {naive}");
    }
}
