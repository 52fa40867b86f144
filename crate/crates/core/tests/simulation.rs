use std::sync::OnceLock;

use impulse_core::fd::{discretize_generator, solve_feynman_kac};
use impulse_core::fixed_point::{solve_randomized, OuterConfig, SolveResult};
use impulse_core::grid::{Grid1D, GridFn};
use impulse_core::model::{LambdaPair, ModelSpec};
use impulse_core::nonlocal::QuadratureRule;
use impulse_core::policy_eval::{estimate_cost, evaluate, execute_policy, Estimator, RandomizedPolicy};
use impulse_core::sde::{simulate_uncontrolled, survival_weights, InitialState, SimConfig};

fn lambda() -> LambdaPair {
    LambdaPair::diagonal(0.5).unwrap()
}

fn solution() -> &'static SolveResult {
    static SOL: OnceLock<SolveResult> = OnceLock::new();
    SOL.get_or_init(|| {
        solve_randomized(&ModelSpec::benchmark(), lambda(), &Grid1D::benchmark(), &OuterConfig::default())
            .unwrap()
    })
}

fn psi0() -> GridFn {
    let spec = ModelSpec::benchmark();
    solve_feynman_kac(&discretize_generator(&spec, &Grid1D::benchmark()), &spec).unwrap()
}

#[test]
fn terminal_law_matches_gaussian_closed_form() {
    let cfg = SimConfig {
        dt: 0.01,
        horizon: 1.0,
        batch: 100_000,
        seed: 5,
        x0: InitialState::Point(0.5),
    };
    let paths = simulate_uncontrolled(&ModelSpec::benchmark(), &cfg).unwrap();
    let xt: Vec<f64> = paths.paths().map(|p| p[p.len() - 1]).collect();
    let n = xt.len() as f64;
    let mean = xt.iter().sum::<f64>() / n;
    let var = xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 0.53).abs() < 4.0 * (var / n).sqrt(), "mean {mean}");
    assert!((var / 0.04 - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn survival_weights_are_probabilities_and_nonincreasing() {
    let cfg = SimConfig {
        batch: 32,
        ..SimConfig::default()
    };
    let paths = simulate_uncontrolled(&ModelSpec::benchmark(), &cfg).unwrap();
    let pi = &solution().pi_star;
    let w = survival_weights(&paths, |x| pi.eval(x), cfg.dt).unwrap();
    assert!(w.weights.iter().all(|p| (0.0..=1.0).contains(p)));
    for row in w.weights.chunks(cfg.steps() + 1) {
        assert_eq!(row[0], 1.0);
        assert!(row.windows(2).all(|p| p[1] <= p[0]));
    }
}

#[test]
fn constant_intensity_fires_at_the_poisson_rate() {
    let spec = ModelSpec::benchmark();
    let policy = RandomizedPolicy::constant(2.0, &psi0(), &spec, 0.5, &QuadratureRule::default()).unwrap();
    let cfg = SimConfig {
        batch: 10_000,
        seed: 9,
        ..SimConfig::default()
    };
    let trajs = execute_policy(&spec, &policy, &cfg).unwrap();
    let counts: Vec<f64> = trajs.iter().map(|t| t.jumps.len() as f64).collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let se = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - 40.0).abs() < 3.0 * se, "mean jumps {mean} (se {se})");
    for t in &trajs {
        for j in &t.jumps {
            assert!((t.post_jump[j.step] - t.pre_jump[j.step] - j.xi).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_intensity_matches_the_free_cost() {
    let spec = ModelSpec::benchmark();
    let psi0 = psi0();
    let policy = RandomizedPolicy::constant(0.0, &psi0, &spec, 0.5, &QuadratureRule::default()).unwrap();
    let cfg = SimConfig {
        horizon: 80.0,
        batch: 10_000,
        seed: 21,
        x0: InitialState::Point(1.0),
        ..SimConfig::default()
    };
    let est = evaluate(&spec, &policy, lambda(), &cfg).unwrap().intensity_weighted;
    assert!(est.contains(psi0.eval(1.0)), "{est:?} vs {}", psi0.eval(1.0));
}

#[test]
fn estimators_agree_and_contain_the_fixed_point() {
    let spec = ModelSpec::benchmark();
    let sol = solution();
    let policy = RandomizedPolicy::from_solution(sol, &spec, lambda(), &QuadratureRule::default()).unwrap();
    let cfg = SimConfig {
        horizon: 80.0,
        batch: 10_000,
        seed: 1,
        x0: InitialState::Point(0.0),
        ..SimConfig::default()
    };
    let ev = evaluate(&spec, &policy, lambda(), &cfg).unwrap();
    let (a, b) = (ev.intensity_weighted, ev.realized);
    let joint = 1.96 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < joint, "{a:?} vs {b:?}");
    assert!(a.contains(sol.psi.eval(0.0)), "{a:?} vs {}", sol.psi.eval(0.0));
    assert!(ev.mean_jumps > 0.0);
}

#[test]
fn recorded_and_streaming_evaluation_agree_bit_for_bit() {
    let spec = ModelSpec::benchmark();
    let policy =
        RandomizedPolicy::from_solution(solution(), &spec, lambda(), &QuadratureRule::default()).unwrap();
    let cfg = SimConfig {
        batch: 200,
        seed: 77,
        ..SimConfig::default()
    };
    let trajs = execute_policy(&spec, &policy, &cfg).unwrap();
    let recorded = estimate_cost(&trajs, &spec, &policy, lambda(), &cfg, Estimator::IntensityWeighted).unwrap();
    let again = execute_policy(&spec, &policy, &cfg).unwrap();
    assert_eq!(trajs, again);
    let streamed = evaluate(&spec, &policy, lambda(), &cfg).unwrap();
    assert_eq!(recorded.mean.to_bits(), streamed.intensity_weighted.mean.to_bits());
}
