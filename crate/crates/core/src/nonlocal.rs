//! Nonlocal intervention operators.
//!
//! The classical operator `Mφ(x) = inf_ξ φ(x+ξ) + l(ξ)` is a deterministic
//! minimization. Its entropy-regularized relaxation against the reference
//! jump law `Φ_x = N(−x, 1)` has the soft-min closed form
//!
//! ```text
//! M^λφ(x) = −λ log E_{ζ∼Φ_x}[exp(−(φ(x+ζ) + l(ζ))/λ)]
//! ```
//!
//! and is attained by the Gibbs jump law `dμ*_x/dΦ_x ∝ exp(−(φ(x+ξ)+l(ξ))/λ)`.
//! Writing `ζ = z − x` with `z ∼ N(0, 1)` puts the expectation over the
//! post-jump state `z`, so the quadrature nodes do not move with `x`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::ModelSpec;

/// Quadrature rule for expectations under the standard normal law.
///
/// Nodes are symmetric about zero and weights positive, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub const DEFAULT_NODES: usize = 2049;
    pub const DEFAULT_HALF_WIDTH: f64 = 12.0;

    /// Trapezoid rule on `n` equispaced nodes over `[−half_width, half_width]`
    /// weighted by the normal density. Second-order accurate even when the
    /// integrand has kinks, which `l` always does.
    pub fn normal_trapezoid(n: usize, half_width: f64) -> Result<Self> {
        if n < 3 || n.is_multiple_of(2) || !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "trapezoid rule with {n} nodes on ±{half_width} (need odd n ≥ 3)"
            )));
        }
        let h = 2.0 * half_width / (n - 1) as f64;
        let mid = (n / 2) as isize;
        let nodes: Vec<f64> = (0..n as isize).map(|k| (k - mid) as f64 * h).collect();
        let mut weights: Vec<f64> = nodes.iter().map(|z| (-0.5 * z * z).exp()).collect();
        weights[0] *= 0.5;
        weights[n - 1] *= 0.5;
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { nodes, weights })
    }

    /// `order`-point Gauss–Hermite rule rescaled to `N(0, 1)`; weights are
    /// normalized to sum to one. Only first-order accurate across the kink
    /// of `l`.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if !(2..=128).contains(&order) {
            return Err(Error::InvalidConfig(format!("quadrature order {order}")));
        }
        let (t, w) = hermite_nodes(order)?;
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        for i in 0..order {
            nodes[i] = std::f64::consts::SQRT_2 * t[i];
            weights[i] = w[i];
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::normal_trapezoid(Self::DEFAULT_NODES, Self::DEFAULT_HALF_WIDTH)
            .expect("default rule is valid")
    }
}

/// Roots and weights of the physicists' Hermite polynomial `H_n` for the
/// weight `e^{−t²}`, by Newton iteration on the orthonormal recurrence.
fn hermite_nodes(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                solver: "hermite root",
                iterations: 100,
                residual: f64::NAN,
                history: Vec::new(),
            });
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // ascending order
    x.reverse();
    w.reverse();
    Ok((x, w))
}

/// Stable `m − λ log Σ wᵢ exp(−(gᵢ − m)/λ)` with `m = minᵢ gᵢ`.
pub(crate) fn soft_min(g: &[f64], weights: &[f64], lambda: f64) -> (f64, f64) {
    let m = g.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = g
        .iter()
        .zip(weights)
        .map(|(&gi, &w)| w * (-(gi - m) / lambda).exp())
        .sum();
    (m - lambda * s.ln(), m)
}

/// `M^λφ(x)` for a bounded-below `φ`, by quadrature over post-jump states.
pub fn randomized_m(
    phi: impl Fn(f64) -> f64,
    x: f64,
    lambda2: f64,
    spec: &ModelSpec,
    rule: &QuadratureRule,
) -> Result<f64> {
    let g: Vec<f64> = rule
        .nodes
        .iter()
        .map(|&z| phi(z) + spec.l(z - x))
        .collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("randomized nonlocal integrand"));
    }
    let (v, _) = soft_min(&g, &rule.weights, lambda2);
    Ok(v)
}

/// `M^λφ` at every node of `phi`'s grid.
pub fn randomized_m_grid(
    phi: &GridFn,
    lambda2: f64,
    spec: &ModelSpec,
    rule: &QuadratureRule,
) -> Result<GridFn> {
    let at_nodes: Vec<f64> = rule.nodes.iter().map(|&z| phi.eval(z)).collect();
    if at_nodes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("randomized nonlocal integrand"));
    }
    let mut g = vec![0.0; rule.order()];
    let values = phi
        .grid()
        .nodes()
        .map(|x| {
            for ((gi, &z), &p) in g.iter_mut().zip(&rule.nodes).zip(&at_nodes) {
                *gi = p + spec.l(z - x);
            }
            soft_min(&g, &rule.weights, lambda2).0
        })
        .collect();
    phi.with_values(values)
}

/// Search settings for the classical operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpSearch {
    /// Half-width added to `|x|` for the default window `[−|x|−w, |x|+w]`.
    pub half_width: f64,
    /// Explicit window; overrides `half_width` when set.
    pub window: Option<(f64, f64)>,
    pub coarse_points: usize,
    pub tol: f64,
}

impl Default for JumpSearch {
    fn default() -> Self {
        Self {
            half_width: 10.0,
            window: None,
            coarse_points: 2001,
            tol: 1e-8,
        }
    }
}

impl JumpSearch {
    fn window_at(&self, x: f64) -> (f64, f64) {
        self.window
            .unwrap_or((-x.abs() - self.half_width, x.abs() + self.half_width))
    }
}

/// `Mφ(x)` and a minimizing jump `ξ*`: coarse scan of the window followed by
/// golden-section refinement of the best bracket.
pub fn classical_m(
    phi: impl Fn(f64) -> f64,
    x: f64,
    spec: &ModelSpec,
    search: &JumpSearch,
) -> Result<(f64, f64)> {
    let (lo, hi) = search.window_at(x);
    let n = search.coarse_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let cost = |xi: f64| phi(x + xi) + spec.l(xi);

    let mut best = (f64::INFINITY, 0usize);
    for k in 0..n {
        let c = cost(lo + k as f64 * step);
        if !c.is_finite() {
            return Err(Error::NonFinite("classical nonlocal objective"));
        }
        if c < best.0 {
            best = (c, k);
        }
    }
    let k = best.1;
    let mut a = lo + k.saturating_sub(1) as f64 * step;
    let mut b = lo + (k + 1).min(n - 1) as f64 * step;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    while (b - a).abs() > search.tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = cost(d);
        }
    }
    let mid = 0.5 * (a + b);
    // ξ = 0 sits on the kink of l and is checked explicitly
    let candidates = [(best.0, lo + k as f64 * step), (cost(mid), mid), (cost(0.0), 0.0)];
    let (value, argmin) = candidates
        .into_iter()
        .filter(|(_, xi)| *xi >= lo && *xi <= hi)
        .fold((f64::INFINITY, 0.0), |acc, c| if c.0 < acc.0 { c } else { acc });

    if argmin - lo < search.tol.max(step * 1e-6) || hi - argmin < search.tol.max(step * 1e-6) {
        return Err(Error::WindowTooSmall { argmin, lo, hi });
    }
    Ok((value, argmin))
}

/// `Mφ` and the minimizing jumps at every node of `phi`'s grid.
pub fn classical_m_grid(
    phi: &GridFn,
    spec: &ModelSpec,
    search: &JumpSearch,
) -> Result<(GridFn, Vec<f64>)> {
    let mut values = Vec::with_capacity(phi.grid().len());
    let mut jumps = Vec::with_capacity(phi.grid().len());
    for x in phi.grid().nodes() {
        let (v, xi) = classical_m(|y| phi.eval(y), x, spec, search)?;
        values.push(v);
        jumps.push(xi);
    }
    Ok((phi.with_values(values)?, jumps))
}

/// Optimal Gibbs jump law `μ*_x` of the regularized nonlocal problem.
#[derive(Debug, Clone)]
pub struct JumpGibbs<'a> {
    x: f64,
    lambda2: f64,
    /// `log E_{Φ_x}[exp(−(φ(x+ζ)+l(ζ))/λ₂)]`, equal to `−M^λφ(x)/λ₂`.
    log_normalizer: f64,
    phi: &'a GridFn,
    spec: &'a ModelSpec,
}

impl<'a> JumpGibbs<'a> {
    pub fn new(
        phi: &'a GridFn,
        spec: &'a ModelSpec,
        x: f64,
        lambda2: f64,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        let m = randomized_m(|y| phi.eval(y), x, lambda2, spec, rule)?;
        Ok(Self {
            x,
            lambda2,
            log_normalizer: -m / lambda2,
            phi,
            spec,
        })
    }

    pub fn anchor(&self) -> f64 {
        self.x
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// `M^λφ(x)`.
    pub fn nonlocal_value(&self) -> f64 {
        -self.lambda2 * self.log_normalizer
    }

    /// `log ρ*_x(ξ)` where `ρ* = dμ*_x/dΦ_x`.
    pub fn log_density(&self, xi: f64) -> f64 {
        -(self.phi.eval(self.x + xi) + self.spec.l(xi)) / self.lambda2 - self.log_normalizer
    }

    pub fn density(&self, xi: f64) -> f64 {
        self.log_density(xi).exp()
    }

    /// `E_{μ*_x}[h(ξ)]` evaluated with `rule` against `Φ_x`.
    pub fn expect(&self, rule: &QuadratureRule, h: impl Fn(f64) -> f64) -> f64 {
        rule.expect(|z| {
            let xi = z - self.x;
            self.density(xi) * h(xi)
        })
    }

    /// Mean and variance of the jump `ξ` under `μ*_x`.
    pub fn moments(&self, rule: &QuadratureRule) -> (f64, f64) {
        let mean = self.expect(rule, |xi| xi);
        let var = self.expect(rule, |xi| (xi - mean) * (xi - mean));
        (mean, var)
    }

    /// Inverse-CDF sampler tabulated on `ξ ∈ [−x−8, −x+8]`.
    pub fn sampler(&self) -> JumpSampler {
        JumpSampler::new(self.phi, self.spec, self.lambda2, JumpSampler::DEFAULT_KNOTS)
            .at(self.x)
    }
}

/// Inverse-CDF sampler for the Gibbs jump law.
///
/// Knots are placed on the post-jump state `y = x + ξ ∈ [−8, 8]`, which is
/// the window `ξ ∈ [−x−8, −x+8]` for every anchor `x`. The `x`-independent
/// part of the log-density is tabulated once, so re-anchoring costs one
/// pass over the knots.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    knots: Vec<f64>,
    /// `φ(y)/λ₂ + y²/2` at each knot.
    base: Vec<f64>,
    lambda2: f64,
    intervention: crate::model::InterventionCost,
    cdf: Vec<f64>,
    anchor: f64,
}

impl JumpSampler {
    pub const DEFAULT_KNOTS: usize = 4096;
    const HALF_WIDTH: f64 = 8.0;

    pub fn new(phi: &GridFn, spec: &ModelSpec, lambda2: f64, knots: usize) -> Self {
        let knots: Vec<f64> = (0..knots)
            .map(|k| -Self::HALF_WIDTH + 2.0 * Self::HALF_WIDTH * k as f64 / (knots - 1) as f64)
            .collect();
        let base = knots
            .iter()
            .map(|&y| phi.eval(y) / lambda2 + 0.5 * y * y)
            .collect();
        Self {
            cdf: vec![0.0; knots.len()],
            knots,
            base,
            lambda2,
            intervention: spec.intervention_cost,
            anchor: f64::NAN,
        }
    }

    /// Re-tabulates the CDF for anchor `x`.
    pub fn at(mut self, x: f64) -> Self {
        self.anchor_at(x);
        self
    }

    pub fn anchor_at(&mut self, x: f64) {
        if self.anchor == x {
            return;
        }
        self.anchor = x;
        let n = self.knots.len();
        let mut min_e = f64::INFINITY;
        for k in 0..n {
            let e = self.base[k] + self.intervention.eval(self.knots[k] - x) / self.lambda2;
            self.cdf[k] = e;
            min_e = min_e.min(e);
        }
        let mut prev = (-(self.cdf[0] - min_e)).exp();
        self.cdf[0] = 0.0;
        let mut acc = 0.0;
        for k in 1..n {
            let cur = (-(self.cdf[k] - min_e)).exp();
            acc += 0.5 * (prev + cur) * (self.knots[k] - self.knots[k - 1]);
            self.cdf[k] = acc;
            prev = cur;
        }
        let total = acc;
        self.cdf.iter_mut().for_each(|c| *c /= total);
    }

    /// Draws a jump `ξ = y − x`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = Uniform::new(0.0, 1.0).expect("valid range").sample(rng);
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.knots.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        let y = self.knots[k - 1] + t * (self.knots[k] - self.knots[k - 1]);
        y - self.anchor
    }
}
