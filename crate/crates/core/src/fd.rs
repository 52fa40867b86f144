//! Finite differences for the generator `𝓛 = b ∂ₓ + ½σ² ∂ₓₓ` and the three
//! elementary PDE solves used by the fixed-point loops:
//!
//! * linear Feynman–Kac `(𝓛 − r)v + f = 0`,
//! * semilinear randomized stopping `(𝓛 − r)v + f − λ₁ exp(−(g − v)/λ₁) = 0`,
//! * classical obstacle problem `min{(𝓛 − r)v + f, g − v} = 0`.
//!
//! Interior rows use central second differences and upwinded first
//! differences, so every assembled matrix is an M-matrix after the `−r`
//! shift. At the two boundary rows the second derivative is dropped, the
//! inward drift is upwinded and the outward drift sees a frozen slope
//! `f'(x_end)/r`, clamped to `±L_f/(r−G)`.

use crate::error::{Error, Result};
use crate::grid::{Grid1D, GridFn};
use crate::model::ModelSpec;

/// Tridiagonal realization of `𝓛` on a grid, plus the constant boundary
/// source from the frozen outward slope: `(𝓛v)ᵢ = subᵢ vᵢ₋₁ + diagᵢ vᵢ +
/// supᵢ vᵢ₊₁ + sourceᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGenerator {
    grid: Grid1D,
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub source: Vec<f64>,
    /// Clamp used for extrapolating solutions built on this generator.
    slope_clamp: f64,
}

impl DiscreteGenerator {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn slope_clamp(&self) -> f64 {
        self.slope_clamp
    }

    /// `(𝓛v)ᵢ` for every node.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n)
            .map(|i| {
                let mut acc = self.diag[i] * v[i] + self.source[i];
                if i > 0 {
                    acc += self.sub[i] * v[i - 1];
                }
                if i + 1 < n {
                    acc += self.sup[i] * v[i + 1];
                }
                acc
            })
            .collect()
    }

    /// Smallest off-diagonal entry; nonnegative for a monotone scheme.
    pub fn min_off_diagonal(&self) -> f64 {
        self.sub
            .iter()
            .chain(&self.sup)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn discretize_generator(spec: &ModelSpec, grid: &Grid1D) -> DiscreteGenerator {
    let n = grid.len();
    let h = grid.step();
    let clamp = spec.value_lipschitz();
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut source = vec![0.0; n];

    for i in 1..n - 1 {
        let x = grid.node(i);
        let a = 0.5 * spec.sigma(x).powi(2) / (h * h);
        let b = spec.b(x);
        sub[i] = a + b.min(0.0).abs() / h;
        sup[i] = a + b.max(0.0) / h;
        diag[i] = -(sub[i] + sup[i]);
    }

    let r = spec.discount;
    let frozen = |x: f64, dir: f64| {
        let eps = 1e-6;
        let df = (spec.f(x + dir * eps) - spec.f(x)) / (dir * eps);
        (df / r).clamp(-clamp, clamp)
    };

    let (x0, xn) = (grid.x_min(), grid.x_max());
    let b0 = spec.b(x0);
    sup[0] = b0.max(0.0) / h;
    diag[0] = -sup[0];
    source[0] = b0.min(0.0) * frozen(x0, -1.0);

    let bn = spec.b(xn);
    sub[n - 1] = bn.min(0.0).abs() / h;
    diag[n - 1] = -sub[n - 1];
    source[n - 1] = bn.max(0.0) * frozen(xn, 1.0);

    DiscreteGenerator {
        grid: *grid,
        sub,
        diag,
        sup,
        source,
        slope_clamp: clamp,
    }
}

/// Thomas algorithm for `sub·x[i−1] + diag·x[i] + sup·x[i+1] = rhs`.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::SingularSystem { row: 0 });
    }
    c[0] = sup[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::SingularSystem { row: i });
        }
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cost of never intervening: solves `(𝓛 − r)v + f = 0`.
pub fn solve_feynman_kac(gen: &DiscreteGenerator, spec: &ModelSpec) -> Result<GridFn> {
    let grid = gen.grid;
    let r = spec.discount;
    let diag: Vec<f64> = gen.diag.iter().map(|d| d - r).collect();
    let rhs: Vec<f64> = grid
        .nodes()
        .zip(&gen.source)
        .map(|(x, s)| -spec.f(x) - s)
        .collect();
    let v = solve_tridiagonal(&gen.sub, &diag, &gen.sup, &rhs)?;
    GridFn::new(grid, v, gen.slope_clamp)
}

/// Residual of `(𝓛 − r)v + f` at every node.
pub fn linear_residual(gen: &DiscreteGenerator, spec: &ModelSpec, v: &[f64]) -> Vec<f64> {
    let r = spec.discount;
    gen.apply(v)
        .into_iter()
        .zip(gen.grid.nodes())
        .zip(v)
        .map(|((lv, x), vi)| lv - r * vi + spec.f(x))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub solution: GridFn,
    /// Sup-norm residual before each step and after the last one.
    pub residuals: Vec<f64>,
}

/// Residual of `(𝓛 − r)v + f − λ₁ exp(−(g − v)/λ₁)` at every node.
pub fn semilinear_residual(
    gen: &DiscreteGenerator,
    spec: &ModelSpec,
    obstacle: &[f64],
    lambda1: f64,
    v: &[f64],
) -> Vec<f64> {
    linear_residual(gen, spec, v)
        .into_iter()
        .zip(obstacle.iter().zip(v))
        .map(|(lin, (g, vi))| lin - lambda1 * ((vi - g) / lambda1).exp())
        .collect()
}

/// Damped Newton for the randomized stopping equation with obstacle `g`.
///
/// The start is `min(init, g + λ₁ log(‖f‖∞/λ₁ + 1))`, which keeps the
/// exponential bounded on the first evaluation.
pub fn solve_semilinear_stopping(
    gen: &DiscreteGenerator,
    spec: &ModelSpec,
    obstacle: &GridFn,
    lambda1: f64,
    init: &GridFn,
    cfg: &NewtonConfig,
) -> Result<NewtonOutcome> {
    if !(lambda1 > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda1 = {lambda1}")));
    }
    let grid = gen.grid;
    let r = spec.discount;
    let g = obstacle.values();
    let f_sup = grid.nodes().map(|x| spec.f(x).abs()).fold(0.0, f64::max);
    let cap = lambda1 * (f_sup / lambda1 + 1.0).ln();
    let mut v: Vec<f64> = init
        .values()
        .iter()
        .zip(g)
        .map(|(&vi, &gi)| vi.min(gi + cap))
        .collect();

    let residual = |v: &[f64]| semilinear_residual(gen, spec, g, lambda1, v);
    let mut res = residual(&v);
    let mut norm = sup_norm(&res);
    let mut history = vec![norm];
    let mut iter = 0;
    while !(norm < cfg.tol) {
        if iter == cfg.max_iter || !norm.is_finite() {
            return Err(Error::NoConvergence {
                solver: "semilinear newton",
                iterations: iter,
                residual: norm,
                history,
            });
        }
        iter += 1;
        let diag: Vec<f64> = gen
            .diag
            .iter()
            .zip(g.iter().zip(&v))
            .map(|(d, (gi, vi))| d - r - ((vi - gi) / lambda1).exp())
            .collect();
        let rhs: Vec<f64> = res.iter().map(|x| -x).collect();
        let step = solve_tridiagonal(&gen.sub, &diag, &gen.sup, &rhs)?;

        let mut t = 1.0;
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = v.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let trial_res = residual(&trial);
            let trial_norm = sup_norm(&trial_res);
            if trial_norm.is_finite() {
                let better = best.as_ref().is_none_or(|b| trial_norm < b.0);
                if better {
                    best = Some((trial_norm, trial, trial_res));
                }
                if trial_norm < norm {
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((n, trial, trial_res)) = best else {
            return Err(Error::NonFinite("semilinear newton step"));
        };
        v = trial;
        res = trial_res;
        norm = n;
        history.push(norm);
    }
    Ok(NewtonOutcome {
        solution: GridFn::new(grid, v, gen.slope_clamp)?,
        residuals: history,
    })
}

#[derive(Debug, Clone)]
pub struct ObstacleOutcome {
    pub solution: GridFn,
    /// `true` where the continuation branch `(𝓛 − r)v + f = 0` is active.
    pub continuation: Vec<bool>,
    pub iterations: usize,
    pub residual: f64,
}

/// Howard policy iteration for `min{(𝓛 − r)v + f, g − v} = 0`.
pub fn solve_obstacle_classical(
    gen: &DiscreteGenerator,
    spec: &ModelSpec,
    obstacle: &GridFn,
    tol: f64,
) -> Result<ObstacleOutcome> {
    let grid = gen.grid;
    let n = grid.len();
    let r = spec.discount;
    let g = obstacle.values();
    let f: Vec<f64> = grid.nodes().map(|x| spec.f(x)).collect();
    let mut cont = vec![true; n];
    let mut residual = f64::INFINITY;

    for iter in 1..=10 * n {
        let mut sub = gen.sub.clone();
        let mut sup = gen.sup.clone();
        let mut diag: Vec<f64> = gen.diag.iter().map(|d| d - r).collect();
        let mut rhs: Vec<f64> = f.iter().zip(&gen.source).map(|(fi, s)| -fi - s).collect();
        for i in 0..n {
            if !cont[i] {
                sub[i] = 0.0;
                sup[i] = 0.0;
                diag[i] = 1.0;
                rhs[i] = g[i];
            }
        }
        let v = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
        let lin = linear_residual(gen, spec, &v);
        let next: Vec<bool> = lin.iter().zip(g.iter().zip(&v)).map(|(a, (gi, vi))| gi - vi >= *a).collect();
        residual = lin
            .iter()
            .zip(g.iter().zip(&v))
            .map(|(a, (gi, vi))| a.min(gi - vi).abs())
            .fold(0.0, f64::max);
        if next == cont {
            if residual < tol {
                return Ok(ObstacleOutcome {
                    solution: GridFn::new(grid, v, gen.slope_clamp)?,
                    continuation: cont,
                    iterations: iter,
                    residual,
                });
            }
            break;
        }
        cont = next;
    }
    Err(Error::NoConvergence {
        solver: "obstacle policy iteration",
        iterations: 10 * n,
        residual,
        history: Vec::new(),
    })
}
