//! Outer fixed-point loops.
//!
//! Starting from the never-intervene cost `ψ⁰`, the randomized loop applies
//! `ψⁿ⁺¹ = T^{λ₁}[M^{λ₂}ψⁿ]`: build the soft obstacle `M^{λ₂}ψⁿ`, then solve
//! the semilinear stopping equation against it. The classical loop replaces
//! both steps by the hard minimum and the obstacle problem. Iterates
//! decrease monotonically and converge geometrically.

use crate::error::{Error, Result};
use crate::fd::{
    discretize_generator, semilinear_residual, solve_feynman_kac, solve_obstacle_classical,
    solve_semilinear_stopping, DiscreteGenerator, NewtonConfig,
};
use crate::grid::{rel_l2_on, sup_on, Grid1D, GridFn};
use crate::model::{LambdaPair, ModelSpec};
use crate::nonlocal::{classical_m_grid, randomized_m_grid, JumpSearch, QuadratureRule};

#[derive(Debug, Clone, PartialEq)]
pub struct OuterConfig {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub tol_newton: f64,
    pub rule: QuadratureRule,
    pub search: JumpSearch,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            tol_outer: 1e-8,
            max_outer: 200,
            tol_newton: 1e-10,
            rule: QuadratureRule::default(),
            search: JumpSearch::default(),
        }
    }
}

impl OuterConfig {
    fn check(&self) -> Result<()> {
        if self.tol_outer > 0.0 && self.tol_newton > 0.0 && self.max_outer > 0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig("outer tolerances must be positive".into()))
        }
    }

    fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            tol: self.tol_newton,
            ..NewtonConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Converged value function.
    pub psi: GridFn,
    /// Never-intervene cost the loop started from.
    pub psi0: GridFn,
    /// Nonlocal operator applied to `psi`.
    pub m_psi: GridFn,
    /// Intervention intensity `exp(−(Mψ − ψ)/λ₁)`; for the classical solve,
    /// the indicator of the action region.
    pub pi_star: GridFn,
    /// `dₙ = sup|ψⁿ⁺¹ − ψⁿ|`.
    pub iterates: Vec<f64>,
    /// `max(ψⁿ⁺¹ − ψⁿ)` per outer step; nonpositive up to solver tolerance.
    pub increments: Vec<f64>,
    /// Largest interior discrete slope of each iterate `ψⁿ⁺¹`.
    pub max_slopes: Vec<f64>,
    pub outer_iters: usize,
    pub q_hat: f64,
    pub r_squared: f64,
    /// Final HJB sup-residual over interior nodes.
    pub residual: f64,
    /// Classical solve only: continuation flags and minimizing jumps.
    pub continuation: Option<Vec<bool>>,
    pub jumps: Option<Vec<f64>>,
}

fn max_interior_slope(psi: &GridFn) -> f64 {
    let h = psi.grid().step();
    psi.values()
        .windows(2)
        .skip(1)
        .take(psi.values().len() - 3)
        .map(|w| ((w[1] - w[0]) / h).abs())
        .fold(0.0, f64::max)
}

fn increments(next: &GridFn, prev: &GridFn) -> (f64, f64) {
    next.values()
        .iter()
        .zip(prev.values())
        .fold((0.0f64, f64::NEG_INFINITY), |(d, inc), (a, b)| {
            (d.max((a - b).abs()), inc.max(a - b))
        })
}

/// Intensity field `π* = exp(−(Mψ − ψ)/λ₁)`.
pub fn intensity(psi: &GridFn, m_psi: &GridFn, lambda1: f64) -> Result<GridFn> {
    let values = psi
        .values()
        .iter()
        .zip(m_psi.values())
        .map(|(p, m)| (-(m - p) / lambda1).exp())
        .collect();
    psi.with_values(values)
}

/// One application of `T^{λ₁}∘M^{λ₂}` to `psi`, warm-started at `psi`.
pub fn randomized_step(
    spec: &ModelSpec,
    gen: &DiscreteGenerator,
    lambda: LambdaPair,
    psi: &GridFn,
    cfg: &OuterConfig,
) -> Result<GridFn> {
    let g = randomized_m_grid(psi, lambda.lambda2, spec, &cfg.rule)?;
    Ok(solve_semilinear_stopping(gen, spec, &g, lambda.lambda1, psi, &cfg.newton())?.solution)
}

pub fn solve_randomized(
    spec: &ModelSpec,
    lambda: LambdaPair,
    grid: &Grid1D,
    cfg: &OuterConfig,
) -> Result<SolveResult> {
    cfg.check()?;
    LambdaPair::new(lambda.lambda1, lambda.lambda2)?;
    let gen = discretize_generator(spec, grid);
    let psi0 = solve_feynman_kac(&gen, spec)?;

    let mut psi = psi0.clone();
    let mut d = Vec::new();
    let mut inc = Vec::new();
    let mut slopes = Vec::new();
    loop {
        if d.len() == cfg.max_outer {
            return Err(Error::NoConvergence {
                solver: "randomized fixed point",
                iterations: d.len(),
                residual: d.last().copied().unwrap_or(f64::NAN),
                history: d,
            });
        }
        let next = randomized_step(spec, &gen, lambda, &psi, cfg)?;
        let (dn, up) = increments(&next, &psi);
        d.push(dn);
        inc.push(up);
        slopes.push(max_interior_slope(&next));
        psi = next;
        if dn < cfg.tol_outer {
            break;
        }
    }

    let m_psi = randomized_m_grid(&psi, lambda.lambda2, spec, &cfg.rule)?;
    let pi_star = intensity(&psi, &m_psi, lambda.lambda1)?;
    let residual = hjb_residual(&gen, &psi, &m_psi, spec, lambda.lambda1);
    let (q_hat, r_squared) = estimate_contraction(&d)
        .map(|c| (c.q_hat, c.r_squared))
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(SolveResult {
        psi,
        psi0,
        m_psi,
        pi_star,
        outer_iters: d.len(),
        iterates: d,
        increments: inc,
        max_slopes: slopes,
        q_hat,
        r_squared,
        residual,
        continuation: None,
        jumps: None,
    })
}

pub fn solve_classical(spec: &ModelSpec, grid: &Grid1D, cfg: &OuterConfig) -> Result<SolveResult> {
    cfg.check()?;
    let gen = discretize_generator(spec, grid);
    let psi0 = solve_feynman_kac(&gen, spec)?;

    let mut psi = psi0.clone();
    let mut d = Vec::new();
    let mut inc = Vec::new();
    let mut slopes = Vec::new();
    let (m_psi, continuation, jumps, residual) = loop {
        if d.len() == cfg.max_outer {
            return Err(Error::NoConvergence {
                solver: "classical fixed point",
                iterations: d.len(),
                residual: d.last().copied().unwrap_or(f64::NAN),
                history: d,
            });
        }
        let (g, jumps) = classical_m_grid(&psi, spec, &cfg.search)?;
        let out = solve_obstacle_classical(&gen, spec, &g, cfg.tol_newton)?;
        let (dn, up) = increments(&out.solution, &psi);
        d.push(dn);
        inc.push(up);
        slopes.push(max_interior_slope(&out.solution));
        psi = out.solution;
        if dn < cfg.tol_outer {
            break (g, out.continuation, jumps, out.residual);
        }
    };

    let action = continuation
        .iter()
        .map(|&c| if c { 0.0 } else { 1.0 })
        .collect();
    let pi_star = psi.with_values(action)?;
    let (q_hat, r_squared) = estimate_contraction(&d)
        .map(|c| (c.q_hat, c.r_squared))
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(SolveResult {
        psi,
        psi0,
        m_psi,
        pi_star,
        outer_iters: d.len(),
        iterates: d,
        increments: inc,
        max_slopes: slopes,
        q_hat,
        r_squared,
        residual,
        continuation: Some(continuation),
        jumps: Some(jumps),
    })
}

/// The `[d, u]` endpoints when the continuation set is a single interval of
/// grid nodes.
pub fn continuation_interval(grid: &Grid1D, continuation: &[bool]) -> Option<(f64, f64)> {
    let first = continuation.iter().position(|&c| c)?;
    let last = continuation.iter().rposition(|&c| c)?;
    if continuation[first..=last].iter().all(|&c| c) {
        Some((grid.node(first), grid.node(last)))
    } else {
        None
    }
}

/// Total length of `{x ∈ window : π(x) < frac·max_window π}`, measured in
/// grid cells.
pub fn flat_region_width(pi: &GridFn, window: (f64, f64), frac: f64) -> f64 {
    let idx: Vec<usize> = pi.grid().indices_within(window.0, window.1).collect();
    let max = idx.iter().map(|&i| pi.values()[i]).fold(0.0, f64::max);
    let flat = idx.iter().filter(|&&i| pi.values()[i] < frac * max).count();
    flat as f64 * pi.grid().step()
}

/// Sup over interior nodes of `|(𝓛 − r)ψ + f − λ₁ exp(−(Mψ − ψ)/λ₁)|`.
pub fn hjb_residual(
    gen: &DiscreteGenerator,
    psi: &GridFn,
    m_psi: &GridFn,
    spec: &ModelSpec,
    lambda1: f64,
) -> f64 {
    let res = semilinear_residual(gen, spec, m_psi.values(), lambda1, psi.values());
    let n = res.len();
    res[1..n - 1].iter().fold(0.0, |m, r| m.max(r.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contraction {
    pub q_hat: f64,
    pub r_squared: f64,
    /// Set when the fitted factor is not below one.
    pub flagged: bool,
}

/// Least-squares fit of `log dₙ` against `n` over `n ≥ 2`.
pub fn estimate_contraction(iterates: &[f64]) -> Result<Contraction> {
    if iterates.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: iterates.len(),
        });
    }
    let pts: Vec<(f64, f64)> = iterates
        .iter()
        .enumerate()
        .skip(2)
        .filter(|(_, &d)| d > 0.0)
        .map(|(n, &d)| (n as f64, d.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: pts.len(),
        });
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    let q_hat = slope.exp();
    Ok(Contraction {
        q_hat,
        r_squared,
        flagged: q_hat >= 1.0,
    })
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub lambda: LambdaPair,
    pub rel_l2_error: f64,
    pub sup_error: f64,
    pub outer_iters: usize,
    pub q_hat: f64,
    /// Smallest slack of `ψ^λ ≥ ψ − λ₁/r` over the grid.
    pub lower_bound_margin: f64,
    pub solution: SolveResult,
}

impl SweepEntry {
    pub fn lower_bound_holds(&self) -> bool {
        self.lower_bound_margin >= -1e-6
    }
}

#[derive(Debug)]
pub struct SweepReport {
    pub classical: SolveResult,
    pub entries: Vec<Result<SweepEntry>>,
}

impl SweepReport {
    /// CSV with columns `lambda1,lambda2,rel_l2_error,sup_error,outer_iters,q_hat`.
    /// Failed entries are written with empty metric fields.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, lambdas: &[LambdaPair]) -> std::io::Result<()> {
        use crate::grid::fmt_f64;
        writeln!(w, "lambda1,lambda2,rel_l2_error,sup_error,outer_iters,q_hat")?;
        for (lam, e) in lambdas.iter().zip(&self.entries) {
            match e {
                Ok(e) => writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    fmt_f64(lam.lambda1),
                    fmt_f64(lam.lambda2),
                    fmt_f64(e.rel_l2_error),
                    fmt_f64(e.sup_error),
                    e.outer_iters,
                    fmt_f64(e.q_hat)
                )?,
                Err(_) => writeln!(w, "{},{},,,,", fmt_f64(lam.lambda1), fmt_f64(lam.lambda2))?,
            }
        }
        Ok(())
    }
}

/// Compare window for sweep errors.
pub const SWEEP_WINDOW: (f64, f64) = (-4.0, 4.0);

pub fn lambda_sweep(
    spec: &ModelSpec,
    grid: &Grid1D,
    lambdas: &[LambdaPair],
    cfg: &OuterConfig,
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda list".into()));
    }
    let classical = solve_classical(spec, grid, cfg)?;
    let (lo, hi) = SWEEP_WINDOW;
    let entries = lambdas
        .iter()
        .map(|&lambda| {
            let sol = solve_randomized(spec, lambda, grid, cfg)?;
            let shift = lambda.lambda1 / spec.discount;
            let lower_bound_margin = sol
                .psi
                .values()
                .iter()
                .zip(classical.psi.values())
                .map(|(a, b)| a - (b - shift))
                .fold(f64::INFINITY, f64::min);
            Ok(SweepEntry {
                lambda,
                rel_l2_error: rel_l2_on(&sol.psi, &classical.psi, lo, hi),
                sup_error: sup_on(&sol.psi, &classical.psi, lo, hi),
                outer_iters: sol.outer_iters,
                q_hat: sol.q_hat,
                lower_bound_margin,
                solution: sol,
            })
        })
        .collect();
    Ok(SweepReport { classical, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_of_geometric_sequence() {
        let d: Vec<f64> = (0..12).map(|n| 0.5f64.powi(n)).collect();
        let c = estimate_contraction(&d).unwrap();
        assert!((c.q_hat - 0.5).abs() < 1e-12);
        assert!((c.r_squared - 1.0).abs() < 1e-12);
        assert!(!c.flagged);
    }

    #[test]
    fn contraction_of_constant_sequence_is_flagged() {
        let c = estimate_contraction(&[0.3; 6]).unwrap();
        assert!((c.q_hat - 1.0).abs() < 1e-12);
        assert!(c.flagged);
    }

    #[test]
    fn contraction_needs_four_points() {
        assert!(matches!(
            estimate_contraction(&[1.0, 0.5, 0.25]),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn hjb_residual_direct_evaluation() {
        use crate::model::{Coefficient, RunningCost};
        let mut spec = ModelSpec::benchmark();
        spec.running_cost = RunningCost::General(Coefficient::Constant(0.0));
        let grid = Grid1D::new(-2.0, 2.0, 41).unwrap();
        let gen = discretize_generator(&spec, &grid);
        let psi = GridFn::constant(grid, 0.0, 10.0).unwrap();
        let m = GridFn::constant(grid, 2.0, 10.0).unwrap();
        let lam = 0.5;
        let r = hjb_residual(&gen, &psi, &m, &spec, lam);
        assert!((r - lam * (-2.0f64 / lam).exp()).abs() < 1e-15);
    }

    #[test]
    fn continuation_interval_detection() {
        let grid = Grid1D::new(0.0, 4.0, 5).unwrap();
        assert_eq!(
            continuation_interval(&grid, &[false, true, true, false, false]),
            Some((1.0, 2.0))
        );
        assert_eq!(continuation_interval(&grid, &[true, false, true, false, false]), None);
        assert_eq!(continuation_interval(&grid, &[false; 5]), None);
    }

    #[test]
    fn flat_region_counts_cells_below_threshold() {
        let grid = Grid1D::new(-2.0, 2.0, 5).unwrap();
        let pi = GridFn::new(grid, vec![10.0, 0.1, 0.2, 0.3, 4.0], 1.0).unwrap();
        assert_eq!(flat_region_width(&pi, (-2.0, 2.0), 0.05), 3.0);
        // the window max drops to 4, so only the 0.1 node stays below 0.2
        assert_eq!(flat_region_width(&pi, (-1.0, 2.0), 0.05), 1.0);
    }
}
