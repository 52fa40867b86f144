use impulse_core::fd::{
    discretize_generator, solve_feynman_kac, solve_obstacle_classical, solve_semilinear_stopping,
    NewtonConfig,
};
use impulse_core::fixed_point::{solve_randomized, OuterConfig};
use impulse_core::grid::{sup_on, Grid1D, GridFn};
use impulse_core::model::{Coefficient, LambdaPair, ModelSpec, RunningCost};
use impulse_core::nonlocal::{randomized_m_grid, QuadratureRule};
use impulse_core::policy_eval::{evaluate, RandomizedPolicy};
use impulse_core::sde::{InitialState, SimConfig};
use proptest::prelude::*;

fn small_grid() -> Grid1D {
    Grid1D::new(-8.0, 8.0, 161).unwrap()
}

/// Two nonnegative running costs with `f1 ≤ f2` on the knots, hence
/// everywhere (same knots, flat beyond them).
fn ordered_costs() -> impl Strategy<Value = (ModelSpec, ModelSpec)> {
    (
        prop::collection::vec(0.0..4.0f64, 9),
        prop::collection::vec(0.0..2.0f64, 9),
    )
        .prop_map(|(base, bump)| {
            let mut knots: Vec<f64> = (0..9).map(|k| 2.0 * k as f64 - 8.0).collect();
            knots.insert(0, -9.0);
            knots.push(9.0);
            let pad = |v: &[f64]| {
                let mut out = vec![v[0]];
                out.extend_from_slice(v);
                out.push(v[v.len() - 1]);
                out
            };
            let low = pad(&base);
            let high: Vec<f64> = low.iter().zip(pad(&bump)).map(|(a, b)| a + b).collect();
            let with = |values: Vec<f64>| ModelSpec {
                running_cost: RunningCost::General(Coefficient::PiecewiseLinear {
                    knots: knots.clone(),
                    values,
                }),
                ..ModelSpec::benchmark()
            };
            (with(low), with(high))
        })
}

fn below(a: &GridFn, b: &GridFn) -> bool {
    a.values().iter().zip(b.values()).all(|(x, y)| *x <= y + 1e-10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn discrete_comparison((lo, hi) in ordered_costs(), obstacle in 0.5..20.0f64, lambda1 in 0.1..1.0f64) {
        let grid = small_grid();
        let gen = discretize_generator(&lo, &grid);
        prop_assert!(gen.min_off_diagonal() >= 0.0);
        let (v_lo, v_hi) = (solve_feynman_kac(&gen, &lo).unwrap(), solve_feynman_kac(&gen, &hi).unwrap());
        prop_assert!(below(&v_lo, &v_hi));

        let g = GridFn::constant(grid, obstacle, v_lo.slope_clamp()).unwrap();
        let newton = NewtonConfig::default();
        let s_lo = solve_semilinear_stopping(&gen, &lo, &g, lambda1, &v_lo, &newton).unwrap().solution;
        let s_hi = solve_semilinear_stopping(&gen, &hi, &g, lambda1, &v_hi, &newton).unwrap().solution;
        prop_assert!(below(&s_lo, &s_hi));

        let o_lo = solve_obstacle_classical(&gen, &lo, &g, 1e-10).unwrap().solution;
        let o_hi = solve_obstacle_classical(&gen, &hi, &g, 1e-10).unwrap().solution;
        prop_assert!(below(&o_lo, &o_hi));
    }
}

#[test]
fn semilinear_solution_stays_below_the_soft_cap() {
    let spec = ModelSpec::benchmark();
    let grid = Grid1D::benchmark();
    let gen = discretize_generator(&spec, &grid);
    let psi0 = solve_feynman_kac(&gen, &spec).unwrap();
    let f_sup = grid.nodes().map(|x| spec.f(x)).fold(0.0, f64::max);
    for lambda in [1.0, 0.5, 0.1, 0.05] {
        let g = randomized_m_grid(&psi0, lambda, &spec, &QuadratureRule::default()).unwrap();
        let v = solve_semilinear_stopping(&gen, &spec, &g, lambda, &psi0, &NewtonConfig::default())
            .unwrap()
            .solution;
        let cap = lambda * (f_sup / lambda + 1.0).ln();
        for (vi, gi) in v.values().iter().zip(g.values()) {
            assert!(*vi <= gi + cap + 1e-6, "lambda {lambda}: {vi} > {gi} + {cap}");
        }
    }
}

#[test]
fn refinement_is_first_order() {
    let spec = ModelSpec::benchmark();
    let lambda = LambdaPair::diagonal(0.5).unwrap();
    let solve = |n| {
        solve_randomized(&spec, lambda, &Grid1D::new(-8.0, 8.0, n).unwrap(), &OuterConfig::default())
            .unwrap()
            .psi
    };
    let (coarse, mid, fine) = (solve(601), solve(1201), solve(2401));
    let on_mid = |f: &GridFn| GridFn::from_fn(*mid.grid(), f.slope_clamp(), |x| f.eval(x)).unwrap();
    let d_coarse = sup_on(&on_mid(&coarse), &mid, -4.0, 4.0);
    let d_fine = sup_on(&on_mid(&fine), &mid, -4.0, 4.0);
    assert!(d_coarse <= 4.0 * d_fine, "{d_coarse} vs {d_fine}");
}

/// Monte Carlo oracle for the never-intervene cost at the origin.
#[test]
fn feynman_kac_matches_monte_carlo() {
    let spec = ModelSpec::benchmark();
    let grid = Grid1D::benchmark();
    let psi0 = solve_feynman_kac(&discretize_generator(&spec, &grid), &spec).unwrap();
    let policy = RandomizedPolicy::constant(0.0, &psi0, &spec, 0.5, &QuadratureRule::default()).unwrap();
    let cfg = SimConfig {
        dt: 0.01,
        horizon: 80.0,
        batch: 100_000,
        seed: 3,
        x0: InitialState::Point(0.0),
    };
    let est = evaluate(&spec, &policy, LambdaPair::diagonal(0.5).unwrap(), &cfg)
        .unwrap()
        .intensity_weighted;
    assert!(est.contains(psi0.eval(0.0)), "{est:?} vs {}", psi0.eval(0.0));
}
