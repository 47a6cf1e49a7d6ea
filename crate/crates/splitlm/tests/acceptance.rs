//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Derived quantities are checked against oracles written here, not
//! against the library's own formulas.

use std::process::ExitCode;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use splitlm::run::{solve_method, Method, SolveReport};
use splitlm::sweep::{aggregate, AggregateRow, SweepRow};
use splitlm_core::ao::{alternating_optimize, AoOptions, NoClock};
use splitlm_core::fractional::{
    fixed_point_residuals, rate_quadratic_form, solve_subproblem2, FracOptions,
};
use splitlm_core::model::{check_feasibility, total_cost};
use splitlm_core::oracle::{brute_force_oracle, GridSpec};
use splitlm_core::scenario::generate_scenario;
use splitlm_core::sqp::{eval_gradient, eval_hessian, eval_lagrangian, LagrangianLayout, SqpState};
use splitlm_core::{Allocation, LlmProfile, Scenario, ScenarioParams, Weights};

const WEIGHTS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn scenario(vehicles: usize, rsus: usize, seed: u64) -> Scenario {
    generate_scenario(&ScenarioParams {
        vehicles,
        rsus,
        seed,
        ..ScenarioParams::default()
    })
    .expect("scenario")
}

/// Allocations produced anywhere in the run, for the feasibility sweep.
#[derive(Default)]
struct Emitted(Vec<(Scenario, Allocation, String)>);

impl Emitted {
    fn push(&mut self, s: &Scenario, a: &Allocation, origin: String) {
        self.0.push((s.clone(), a.clone(), origin));
    }
}

fn random_state(s: &Scenario, rng: &mut ChaCha8Rng) -> SqpState {
    let mut st = SqpState::initial(s);
    let upsilon = f64::from(s.llm.layer_count);
    for i in 0..s.vehicle_count() {
        st.layers[i] = rng.random_range(1.0..upsilon);
        st.vehicle_freq[i] = s.vehicles[i].hardware.f_max * rng.random_range(0.05..1.0);
        let m = s.association[i];
        st.rsu_freq[i] =
            s.rsus[m].hardware.f_max * rng.random_range(0.05..1.0) / s.members(m).len() as f64;
        st.lambda[i] = rng.random_range(0.0..1.0);
        st.mu[i] = rng.random_range(0.0..1.0);
        st.gamma[i] = rng.random_range(0.0..1e-8);
    }
    for m in 0..s.rsu_count() {
        st.sigma[m] = rng.random_range(0.0..1e-8);
    }
    st
}

fn flatten(s: &Scenario, st: &SqpState) -> Vec<f64> {
    let lay = LagrangianLayout::of(s);
    let mut z = vec![0.0; lay.len()];
    for i in 0..s.vehicle_count() {
        z[lay.layers(i)] = st.layers[i];
        z[lay.vehicle_freq(i)] = st.vehicle_freq[i];
        z[lay.rsu_freq(i)] = st.rsu_freq[i];
        z[lay.lambda(i)] = st.lambda[i];
        z[lay.mu(i)] = st.mu[i];
        z[lay.gamma(i)] = st.gamma[i];
    }
    for m in 0..s.rsu_count() {
        z[lay.sigma(m)] = st.sigma[m];
    }
    z
}

fn unflatten(s: &Scenario, template: &SqpState, z: &[f64]) -> SqpState {
    let lay = LagrangianLayout::of(s);
    let mut st = template.clone();
    for i in 0..s.vehicle_count() {
        st.layers[i] = z[lay.layers(i)];
        st.vehicle_freq[i] = z[lay.vehicle_freq(i)];
        st.rsu_freq[i] = z[lay.rsu_freq(i)];
        st.lambda[i] = z[lay.lambda(i)];
        st.mu[i] = z[lay.mu(i)];
        st.gamma[i] = z[lay.gamma(i)];
    }
    for m in 0..s.rsu_count() {
        st.sigma[m] = z[lay.sigma(m)];
    }
    st
}

fn step(z: f64) -> f64 {
    1e-5 * z.abs().max(1e-6)
}

/// Relative error with entries far below the vector's magnitude compared
/// on that magnitude instead, so exact zeros are not divided by.
fn rel_err(fd: f64, exact: f64, magnitude: f64) -> f64 {
    (fd - exact).abs() / exact.abs().max(1e-9 * magnitude).max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut g_err, mut h_err) = (0.0_f64, 0.0_f64);
    let states = 60;
    for k in 0..states {
        let s = scenario(4, 2, k);
        let w = Weights::from_time(rng.random_range(0.05..0.95)).unwrap();
        let st = random_state(&s, &mut rng);
        let z = flatten(&s, &st);
        let grad = eval_gradient(&st, &s, w).unwrap();
        let hess = eval_hessian(&st, &s, w).unwrap();
        let lag = |z: &[f64]| eval_lagrangian(&unflatten(&s, &st, z), &s, w).unwrap();
        let gradient = |z: &[f64]| eval_gradient(&unflatten(&s, &st, z), &s, w).unwrap();
        let g_mag = grad.amax();
        for j in 0..z.len() {
            let h = step(z[j]);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            let fd = (lag(&zp) - lag(&zm)) / (2.0 * h);
            // Entries of order |L|·ε/h are rounding noise in the difference.
            let noise = lag(&z).abs() * 1e-13 / h;
            if grad[j].abs() > noise {
                g_err = g_err.max(rel_err(fd, grad[j], g_mag));
            }
            let (gp, gm) = (gradient(&zp), gradient(&zm));
            let row_mag = hess.row(j).amax().max(hess.column(j).amax());
            for i in 0..z.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                h_err = h_err.max(rel_err(fd, hess[(i, j)], row_mag));
            }
        }
    }
    Outcome {
        pass: g_err <= 1e-5 && h_err <= 1e-4,
        detail: format!("{states} states, max gradient rel err {g_err:.2e} (tol 1e-5), max hessian rel err {h_err:.2e} (tol 1e-4)"),
    }
}

/// Shannon rate in bit/s, written out independently of the library.
fn rate(p: f64, b: f64, g: f64, noise: f64) -> f64 {
    b * (g * p / (noise * b)).ln_1p() / std::f64::consts::LN_2
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let noise = 3.981_071_705_534_985e-17;
    let log_uniform =
        |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
    let draws = 10_000;
    let (mut worst, mut fd_err, mut fd_checked) = (f64::NEG_INFINITY, 0.0_f64, 0);
    for k in 0..draws {
        let p = log_uniform(&mut rng, 1e-3, 20.0);
        let b = log_uniform(&mut rng, 1e3, 2e7);
        let gains: Vec<f64> = (0..3).map(|_| log_uniform(&mut rng, 1e-16, 1e-9)).collect();
        let mut chi = vec![0.0; 3];
        chi[rng.random_range(0..3usize)] = 1.0;
        let x = [
            rng.random_range(-1.0..1.0) * p,
            rng.random_range(-1.0..1.0) * b,
        ];
        let q = rate_quadratic_form(p, b, &gains, &chi, noise, x).unwrap();
        // Magnitude of the form with the cancellation removed.
        let scale: f64 = gains
            .iter()
            .zip(&chi)
            .map(|(&g, &c)| {
                let s = b * noise + g * p;
                c * g * g * (b * x[0].abs() + p * x[1].abs()).powi(2)
                    / (std::f64::consts::LN_2 * b * s * s)
            })
            .sum();
        worst = worst.max(q / scale);
        if k % 10 == 0 {
            // Second directional derivative of the rate by central differences,
            // kept only where the curvature clears the differencing noise.
            let r = |t: f64| -> f64 {
                gains
                    .iter()
                    .zip(&chi)
                    .map(|(&g, &c)| c * rate(p + t * x[0], b + t * x[1], g, noise))
                    .sum()
            };
            let t = 0.02;
            let fd = (r(t) - 2.0 * r(0.0) + r(-t)) / (t * t);
            let rounding = r(0.0).abs() * 1e-14 / (t * t);
            if scale > 1e3 * rounding {
                fd_checked += 1;
                fd_err = fd_err.max((fd - q).abs() / scale);
            }
        }
    }
    Outcome {
        pass: worst <= 1e-12 && fd_err <= 1e-2 && fd_checked > 0,
        detail: format!(
            "{draws} draws, max form/scale {worst:.2e} (tol 1e-12), finite-difference mismatch {fd_err:.2e} of scale on {fd_checked} draws"
        ),
    }
}

fn criterion_3(emitted: &mut Emitted) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    let seeds = 6;
    let mut pass = true;
    for seed in 0..seeds {
        let mut params = ScenarioParams {
            vehicles: 2,
            rsus: 1,
            seed,
            ..ScenarioParams::default()
        };
        params.llm = LlmProfile::new(params.llm.hidden_size, 4, params.llm.batch_size).unwrap();
        let s = generate_scenario(&params).unwrap();
        let w = Weights::from_time(0.5).unwrap();
        let grid = GridSpec {
            points: 20,
            ..GridSpec::default()
        };
        let (oracle_alloc, oracle) = match brute_force_oracle(&s, w, &grid) {
            Ok(r) => r,
            Err(e) => {
                pass = false;
                lines.push(format!("seed {seed}: oracle failed: {e}"));
                continue;
            }
        };
        emitted.push(&s, &oracle_alloc, format!("oracle seed {seed}"));
        match alternating_optimize(&s, w, &AoOptions::default(), &NoClock) {
            Ok((alloc, _)) => {
                let ao = total_cost(&s, &alloc, w).unwrap().weighted_total;
                let gap = ao / oracle - 1.0;
                worst = worst.max(gap);
                pass &= gap <= 0.05;
                lines.push(format!("{gap:+.3}"));
                emitted.push(&s, &alloc, format!("ao tiny seed {seed}"));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("seed {seed}: ao failed: {}", e.error));
            }
        }
    }
    Outcome {
        pass,
        detail: format!(
            "{seeds} seeds of (2,1,4), AO/oracle − 1 = [{}], worst {worst:+.3} (tol +0.05)",
            lines.join(", ")
        ),
    }
}

fn criterion_4(emitted: &mut Emitted) -> Outcome {
    let runs: Vec<_> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let s = scenario(20, 5, 1000 + seed);
            let w = Weights::from_time(WEIGHTS[seed as usize % WEIGHTS.len()]).unwrap();
            let out = alternating_optimize(&s, w, &AoOptions::default(), &NoClock);
            (s, out)
        })
        .collect();
    let mut bad = Vec::new();
    let mut rounds = 0;
    for (k, (s, out)) in runs.into_iter().enumerate() {
        match out {
            Ok((alloc, trace)) => {
                rounds += trace.rounds.len();
                if !trace.is_non_increasing(1e-6) {
                    bad.push(format!("seed {}: {:?}", 1000 + k, trace.totals()));
                }
                emitted.push(&s, &alloc, format!("ao descent seed {}", 1000 + k));
            }
            Err(e) => bad.push(format!("seed {}: {}", 1000 + k, e.error)),
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "50 scenarios of 20 vehicles / 5 RSUs, {rounds} rounds in total, {} violations {}",
            bad.len(),
            bad.join("; ")
        ),
    }
}

fn sweep(emitted: &mut Emitted) -> Vec<AggregateRow> {
    let scenarios: Vec<Scenario> = (0..10).map(|seed| scenario(20, 5, seed)).collect();
    let jobs: Vec<(f64, usize, Method)> = WEIGHTS
        .iter()
        .flat_map(|&wt| (0..scenarios.len()).flat_map(move |k| Method::ALL.map(|m| (wt, k, m))))
        .collect();
    let reports: Vec<(usize, SolveReport)> = jobs
        .into_par_iter()
        .map(|(wt, k, m)| {
            let r = solve_method(&scenarios[k], wt, m, 7 + k as u64, &AoOptions::default())
                .expect("sweep row");
            (k, r)
        })
        .collect();
    let mut rows = Vec::new();
    for (k, r) in &reports {
        emitted.push(
            &scenarios[*k],
            &r.allocation,
            format!("sweep {} wt {} seed {k}", r.method, r.weight_time),
        );
        rows.push(SweepRow::from_report(*k as u64, r));
    }
    aggregate(&rows)
}

fn by_method(agg: &[AggregateRow], method: Method) -> Vec<&AggregateRow> {
    agg.iter().filter(|r| r.method == method).collect()
}

fn criterion_5(agg: &[AggregateRow]) -> Outcome {
    let prop = by_method(agg, Method::Proposed);
    let rlor = by_method(agg, Method::Rlor);
    let rrol = by_method(agg, Method::Rrol);
    let times: Vec<f64> = prop.iter().map(|r| r.objective_time_s).collect();
    let decreasing = times.windows(2).all(|w| w[1] < w[0]);
    let mut dominance = true;
    let mut ratios = Vec::new();
    for k in 0..prop.len() {
        dominance &= prop[k].objective_time_s <= rlor[k].objective_time_s;
        dominance &= prop[k].objective_time_s <= rrol[k].objective_time_s;
        ratios.push(format!(
            "{:.2}",
            1.0 - prop[k].objective_time_s / rlor[k].objective_time_s
        ));
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|t| format!("{t:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome {
        pass: decreasing && dominance,
        detail: format!(
            "10 seeds, proposed objective_time [{}] s, strictly decreasing {decreasing}, below both baselines {dominance}; reduction vs RLOR [{}] (reported only)",
            fmt(&times),
            ratios.join(" ")
        ),
    }
}

fn criterion_6(agg: &[AggregateRow]) -> Outcome {
    let prop = by_method(agg, Method::Proposed);
    let rlor = by_method(agg, Method::Rlor);
    let rrol = by_method(agg, Method::Rrol);
    let energy: Vec<f64> = prop.iter().map(|r| r.energy_j).collect();
    let increasing = energy.windows(2).all(|w| w[1] >= w[0]);
    let mut vs_rrol = true;
    let mut vs_rlor = true;
    for k in 0..prop.len() {
        vs_rrol &= prop[k].energy_j <= rrol[k].energy_j;
        if prop[k].wt >= 0.3 - 1e-12 {
            vs_rlor &= prop[k].energy_j <= rlor[k].energy_j;
        }
    }
    let fmt = |rows: &[&AggregateRow]| {
        rows.iter()
            .map(|r| format!("{:.2}", r.energy_j))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome {
        pass: increasing && vs_rrol && vs_rlor,
        detail: format!(
            "proposed energy [{}] J non-decreasing {increasing}; <= RROL [{}] {vs_rrol}; <= RLOR [{}] at wt >= 0.3 {vs_rlor}",
            fmt(&prop),
            fmt(&rrol),
            fmt(&rlor)
        ),
    }
}

fn criterion_7() -> Outcome {
    let results: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let s = scenario(20, 5, 500 + seed);
            let w = Weights::from_time(0.1 + 0.04 * seed as f64).unwrap();
            let sol = solve_subproblem2(&s, w, &FracOptions::default(), None).unwrap();
            // Residuals recomputed here from the rate definition.
            let (mut epi, mut mult) = (0.0_f64, 0.0_f64);
            for i in 0..s.vehicle_count() {
                let st = &sol.state;
                let m = s.association[i];
                let r = rate(
                    st.power[i],
                    st.bandwidth[i],
                    s.gains[i][m],
                    s.params.noise_psd,
                );
                let pd = st.power[i] * s.vehicles[i].payload_bits;
                epi = epi.max((pd - st.beta[i] * r).abs() / pd);
                mult = mult.max((st.nu[i] * r - w.energy()).abs());
            }
            let lib = fixed_point_residuals(&s, w, &sol.state).unwrap();
            (epi, mult, lib, sol.diagnostics.converged)
        })
        .collect();
    let epi = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let mult = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let converged = results.iter().filter(|r| r.3).count();
    Outcome {
        pass: epi <= 1e-8 && mult <= 1e-8,
        detail: format!(
            "20 instances, max |p·d − β·R|/(p·d) {epi:.2e}, max |ν·R − ω_e| {mult:.2e} (tol 1e-8), {converged}/20 report convergence"
        ),
    }
}

fn criterion_8(emitted: &Emitted) -> Outcome {
    let bad: Vec<String> = emitted
        .0
        .iter()
        .filter_map(|(s, a, origin)| {
            check_feasibility(s, a)
                .err()
                .map(|e| format!("{origin}: {e}"))
        })
        .collect();
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "{} allocations checked, {} infeasible {}",
            emitted.0.len(),
            bad.len(),
            bad.join("; ")
        ),
    }
}

fn report(n: usize, name: &str, limit_s: f64, run: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = run();
    let secs = t.elapsed().as_secs_f64();
    let pass = out.pass && secs < limit_s;
    println!(
        "criterion {n} {name}: {} ({}; {secs:.1} s, limit {limit_s} s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn main() -> ExitCode {
    let mut emitted = Emitted::default();
    let mut ok = true;
    ok &= report(1, "formula fidelity", 10.0, criterion_1);
    ok &= report(2, "rate curvature", 5.0, criterion_2);
    ok &= report(3, "oracle equivalence", 120.0, || criterion_3(&mut emitted));
    ok &= report(4, "AO descent", 300.0, || criterion_4(&mut emitted));
    let t = Instant::now();
    let agg = sweep(&mut emitted);
    let sweep_s = t.elapsed().as_secs_f64();
    ok &= report(5, "completion-time trend", f64::INFINITY, || {
        let mut o = criterion_5(&agg);
        o.detail.push_str(&format!("; sweep {sweep_s:.1} s"));
        o
    });
    ok &= report(6, "energy trend", f64::INFINITY, || criterion_6(&agg));
    ok &= report(7, "fixed point", f64::INFINITY, criterion_7);
    ok &= report(8, "feasibility", f64::INFINITY, || criterion_8(&emitted));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
