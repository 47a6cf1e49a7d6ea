use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitlm_core::ao::{alternating_optimize, AoOptions, NoClock};
use splitlm_core::metrics::completion_time_metric;
use splitlm_core::scenario::generate_scenario;
use splitlm_core::sqp::{optimize_frequencies, SqpOptions};
use splitlm_core::{Scenario, ScenarioParams, Weights};

fn scenario(seed: u64) -> Scenario {
    generate_scenario(&ScenarioParams {
        vehicles: 20,
        rsus: 5,
        seed,
        ..ScenarioParams::default()
    })
    .unwrap()
}

#[test]
fn delay_weight_shortens_compute_time() {
    for seed in 0..3 {
        let s = scenario(seed);
        let time = |wt: f64| {
            let (a, _) = alternating_optimize(
                &s,
                Weights::from_time(wt).unwrap(),
                &AoOptions::default(),
                &NoClock,
            )
            .unwrap();
            completion_time_metric(&s, &a).unwrap().objective_time
        };
        assert!(time(0.9) < time(0.1), "seed {seed}");
    }
}

#[test]
fn frequency_pass_for_random_split_reaches_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let s = scenario(seed);
        let layers: Vec<u32> = (0..20)
            .map(|_| rng.random_range(1..=s.llm.layer_count))
            .collect();
        let (_, _, diag) = optimize_frequencies(
            &s,
            Weights::from_time(0.5).unwrap(),
            &layers,
            None,
            &SqpOptions::default(),
        )
        .unwrap();
        assert!(diag.converged, "seed {seed}: {diag:?}");
        assert!(diag.residual <= 1e-6);
    }
}
