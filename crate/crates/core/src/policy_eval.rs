//! Monte Carlo evaluation of a randomized impulse policy.
//!
//! The policy is executed as a jump diffusion: at each step the state pays
//! its running cost, an intervention fires with probability `min(πΔt, 1)`
//! and, if it does, a jump drawn from the Gibbs law is applied before the
//! Euler–Maruyama move. Two estimators of the regularized cost are kept:
//! the intensity-weighted one charges the expected jump cost at every step,
//! the realized one charges `l(ξ) + λ₂ log ρ*(ξ)` only when a jump fires.

use crate::error::{Error, Result};
use crate::fixed_point::SolveResult;
use crate::grid::{fmt_f64, GridFn};
use crate::model::{LambdaPair, ModelSpec};
use crate::nonlocal::{soft_min, JumpSampler, QuadratureRule};
use crate::sde::{euler_step, RngStream, SimConfig};

/// `𝓡(π) = π − π log π`, continuously extended by `𝓡(0) = 0`.
pub fn entropy_r(pi: f64) -> Result<f64> {
    if !(pi >= 0.0) {
        return Err(Error::NegativeIntensity(pi));
    }
    Ok(if pi == 0.0 { 0.0 } else { pi - pi * pi.ln() })
}

#[derive(Debug, Clone)]
pub enum Intensity {
    Constant(f64),
    /// `π(x) = exp(−(Mψ(x) − ψ(x))/λ₁)` from interpolated `ψ` and `Mψ`.
    Gibbs {
        psi: GridFn,
        m_psi: GridFn,
        lambda1: f64,
    },
}

impl Intensity {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Intensity::Constant(c) => *c,
            Intensity::Gibbs {
                psi,
                m_psi,
                lambda1,
            } => (-(m_psi.eval(x) - psi.eval(x)) / lambda1).exp(),
        }
    }
}

/// Gibbs jump law built from a value snapshot `φ`.
#[derive(Debug, Clone)]
pub struct JumpLaw {
    phi: GridFn,
    m_phi: GridFn,
    /// `E_{μ*_x}[l(ξ) + λ₂ log ρ*_x(ξ)]` on the grid.
    jump_cost: GridFn,
    lambda2: f64,
    sampler: JumpSampler,
}

impl JumpLaw {
    pub fn new(phi: &GridFn, spec: &ModelSpec, lambda2: f64, rule: &QuadratureRule) -> Result<Self> {
        if !(lambda2 > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda2 = {lambda2}")));
        }
        let at_nodes: Vec<f64> = rule.nodes().iter().map(|&z| phi.eval(z)).collect();
        if at_nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("jump law snapshot"));
        }
        let mut g = vec![0.0; rule.order()];
        let mut m_values = Vec::with_capacity(phi.grid().len());
        let mut j_values = Vec::with_capacity(phi.grid().len());
        for x in phi.grid().nodes() {
            for ((gi, &z), &p) in g.iter_mut().zip(rule.nodes()).zip(&at_nodes) {
                *gi = p + spec.l(z - x);
            }
            let (m_val, shift) = soft_min(&g, rule.weights(), lambda2);
            // l + λ₂ log ρ* = Mφ(x) − φ(x + ξ), averaged under μ*.
            let (mut num, mut den) = (0.0, 0.0);
            for ((&gi, &w), &p) in g.iter().zip(rule.weights()).zip(&at_nodes) {
                let e = w * (-(gi - shift) / lambda2).exp();
                num += e * p;
                den += e;
            }
            m_values.push(m_val);
            j_values.push(m_val - num / den);
        }
        Ok(Self {
            phi: phi.clone(),
            m_phi: phi.with_values(m_values)?,
            jump_cost: phi.with_values(j_values)?,
            lambda2,
            sampler: JumpSampler::new(phi, spec, lambda2, JumpSampler::DEFAULT_KNOTS),
        })
    }

    pub fn phi(&self) -> &GridFn {
        &self.phi
    }

    pub fn m_phi(&self) -> &GridFn {
        &self.m_phi
    }

    pub fn jump_cost(&self) -> &GridFn {
        &self.jump_cost
    }

    /// `log ρ*_x(ξ)`.
    pub fn log_density(&self, spec: &ModelSpec, x: f64, xi: f64) -> f64 {
        -(self.phi.eval(x + xi) + spec.l(xi) - self.m_phi.eval(x)) / self.lambda2
    }
}

#[derive(Debug, Clone)]
pub struct RandomizedPolicy {
    pub intensity: Intensity,
    pub jumps: JumpLaw,
}

impl RandomizedPolicy {
    /// `(π*, μ*)` of a converged randomized solve.
    pub fn from_solution(
        sol: &SolveResult,
        spec: &ModelSpec,
        lambda: LambdaPair,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        let jumps = JumpLaw::new(&sol.psi, spec, lambda.lambda2, rule)?;
        Ok(Self {
            intensity: Intensity::Gibbs {
                psi: sol.psi.clone(),
                m_psi: jumps.m_phi.clone(),
                lambda1: lambda.lambda1,
            },
            jumps,
        })
    }

    /// Constant intensity with jumps drawn from the Gibbs law of `phi`.
    pub fn constant(
        pi: f64,
        phi: &GridFn,
        spec: &ModelSpec,
        lambda2: f64,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        if !(pi >= 0.0) {
            return Err(Error::NegativeIntensity(pi));
        }
        Ok(Self {
            intensity: Intensity::Constant(pi),
            jumps: JumpLaw::new(phi, spec, lambda2, rule)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub step: usize,
    pub xi: f64,
    pub log_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlledTrajectory {
    /// `X_{t_i}` before any jump, `M + 1` entries.
    pub pre_jump: Vec<f64>,
    /// State after the (possible) jump at step `i`, `M` entries.
    pub post_jump: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    /// `π(X_{t_i})`, `M` entries.
    pub intensities: Vec<f64>,
}

struct Step {
    i: usize,
    x: f64,
    pi: f64,
    jump: Option<JumpEvent>,
    x_after: f64,
}

/// Runs path `b`; `visit` sees every step in order and the final state is
/// returned.
fn run_path(
    spec: &ModelSpec,
    policy: &RandomizedPolicy,
    cfg: &SimConfig,
    b: usize,
    sampler: &mut JumpSampler,
    mut visit: impl FnMut(&Step),
) -> Result<f64> {
    let mut diffusion = RngStream::diffusion(cfg.seed, b as u64);
    let mut control = RngStream::control(cfg.seed, b as u64);
    let (dt, sqrt_dt) = (cfg.dt, cfg.dt.sqrt());
    let mut x = cfg.x0.sample(&mut diffusion);
    for i in 0..cfg.steps() {
        let pi = policy.intensity.eval(x);
        if !(pi >= 0.0) {
            return Err(Error::NegativeIntensity(pi));
        }
        let mut jump = None;
        let mut x_after = x;
        if pi > 0.0 && control.uniform() < (pi * dt).min(1.0) {
            sampler.anchor_at(x);
            let xi = sampler.sample(&mut control);
            let log_rho = policy.jumps.log_density(spec, x, xi);
            jump = Some(JumpEvent {
                step: i,
                xi,
                log_rho,
            });
            x_after = x + xi;
        }
        visit(&Step {
            i,
            x,
            pi,
            jump,
            x_after,
        });
        x = euler_step(spec, x_after, dt, sqrt_dt, diffusion.normal());
        if !x.is_finite() {
            return Err(Error::NonFinite("controlled path"));
        }
    }
    Ok(x)
}

/// Executes the policy on `cfg.batch` paths. Path `b` uses the same
/// diffusion stream as [`crate::sde::simulate_uncontrolled`], so with
/// `π ≡ 0` the states coincide bit for bit.
pub fn execute_policy(
    spec: &ModelSpec,
    policy: &RandomizedPolicy,
    cfg: &SimConfig,
) -> Result<Vec<ControlledTrajectory>> {
    cfg.validate()?;
    let steps = cfg.steps();
    let mut sampler = policy.jumps.sampler.clone();
    (0..cfg.batch)
        .map(|b| {
            let mut t = ControlledTrajectory {
                pre_jump: Vec::with_capacity(steps + 1),
                post_jump: Vec::with_capacity(steps),
                jumps: Vec::new(),
                intensities: Vec::with_capacity(steps),
            };
            let last = run_path(spec, policy, cfg, b, &mut sampler, |s| {
                t.pre_jump.push(s.x);
                t.post_jump.push(s.x_after);
                t.intensities.push(s.pi);
                t.jumps.extend(s.jump);
            })?;
            t.pre_jump.push(last);
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
    /// Bound on the discounted cost beyond the horizon, `e^{−rT}·sup|φ|`.
    pub tail_bound: f64,
    pub horizon: f64,
}

impl CostEstimate {
    fn from_samples(samples: &[f64], tail_bound: f64, horizon: f64) -> Self {
        let n = samples.len();
        let mean = pairwise_sum(samples) / n as f64;
        let sq: Vec<f64> = samples.iter().map(|s| (s - mean) * (s - mean)).collect();
        let var = if n > 1 { pairwise_sum(&sq) / (n - 1) as f64 } else { 0.0 };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
            tail_bound,
            horizon,
        }
    }

    pub fn sample_variance(&self) -> f64 {
        self.std_err * self.std_err * self.n as f64
    }

    /// 95% interval widened by the truncation bound on both sides.
    pub fn ci95(&self) -> (f64, f64) {
        let half = 1.96 * self.std_err + self.tail_bound;
        (self.mean - half, self.mean + half)
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.ci95();
        (lo..=hi).contains(&v)
    }
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn tail_bound(spec: &ModelSpec, policy: &RandomizedPolicy, horizon: f64) -> f64 {
    let sup = policy
        .jumps
        .phi
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    (-spec.discount * horizon).exp() * sup
}

/// Running cost of one step, excluding any jump charge.
#[inline]
fn running(spec: &ModelSpec, lambda1: f64, x: f64, pi: f64, dt: f64) -> f64 {
    let p_fire = (pi * dt).min(1.0);
    // with p_fire = πΔt this is (f − λ₁𝓡(π))Δt
    let r = if pi == 0.0 { 0.0 } else { p_fire * (1.0 - pi.ln()) };
    spec.f(x) * dt - lambda1 * r
}

#[derive(Debug, Clone, Copy, Default)]
struct PathCost {
    weighted: f64,
    realized: f64,
    jumps: usize,
}

struct Accumulator<'a> {
    spec: &'a ModelSpec,
    policy: &'a RandomizedPolicy,
    lambda: LambdaPair,
    dt: f64,
    discount: Vec<f64>,
    cost: PathCost,
}

impl<'a> Accumulator<'a> {
    fn new(spec: &'a ModelSpec, policy: &'a RandomizedPolicy, lambda: LambdaPair, cfg: &SimConfig) -> Self {
        let discount = (0..cfg.steps())
            .map(|i| (-spec.discount * i as f64 * cfg.dt).exp())
            .collect();
        Self {
            spec,
            policy,
            lambda,
            dt: cfg.dt,
            discount,
            cost: PathCost::default(),
        }
    }

    fn step(&mut self, i: usize, x: f64, pi: f64, jump: Option<&JumpEvent>) {
        let d = self.discount[i];
        let base = running(self.spec, self.lambda.lambda1, x, pi, self.dt);
        let p_fire = (pi * self.dt).min(1.0);
        let expected = if p_fire > 0.0 {
            p_fire * self.policy.jumps.jump_cost.eval(x)
        } else {
            0.0
        };
        self.cost.weighted += d * (base + expected);
        self.cost.realized += d * base;
        if let Some(j) = jump {
            self.cost.realized += d * (self.spec.l(j.xi) + self.lambda.lambda2 * j.log_rho);
            self.cost.jumps += 1;
        }
    }

    fn finish(&mut self) -> PathCost {
        std::mem::take(&mut self.cost)
    }
}

/// Which jump-cost estimator to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    IntensityWeighted,
    Realized,
}

/// Regularized cost of recorded trajectories.
pub fn estimate_cost(
    trajectories: &[ControlledTrajectory],
    spec: &ModelSpec,
    policy: &RandomizedPolicy,
    lambda: LambdaPair,
    cfg: &SimConfig,
    estimator: Estimator,
) -> Result<CostEstimate> {
    if trajectories.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut acc = Accumulator::new(spec, policy, lambda, cfg);
    let samples: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            let mut jumps = t.jumps.iter().peekable();
            for (i, (&x, &pi)) in t.pre_jump.iter().zip(&t.intensities).enumerate() {
                let jump = jumps.next_if(|j| j.step == i);
                acc.step(i, x, pi, jump);
            }
            let c = acc.finish();
            match estimator {
                Estimator::IntensityWeighted => c.weighted,
                Estimator::Realized => c.realized,
            }
        })
        .collect();
    let tail = tail_bound(spec, policy, cfg.horizon);
    Ok(CostEstimate::from_samples(&samples, tail, cfg.horizon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub intensity_weighted: CostEstimate,
    pub realized: CostEstimate,
    pub mean_jumps: f64,
}

/// Streaming evaluation: both estimators from one pass without storing
/// the paths.
pub fn evaluate(
    spec: &ModelSpec,
    policy: &RandomizedPolicy,
    lambda: LambdaPair,
    cfg: &SimConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let mut sampler = policy.jumps.sampler.clone();
    let mut acc = Accumulator::new(spec, policy, lambda, cfg);
    let mut weighted = Vec::with_capacity(cfg.batch);
    let mut realized = Vec::with_capacity(cfg.batch);
    let mut jumps = 0usize;
    for b in 0..cfg.batch {
        run_path(spec, policy, cfg, b, &mut sampler, |s| {
            acc.step(s.i, s.x, s.pi, s.jump.as_ref())
        })?;
        let c = acc.finish();
        weighted.push(c.weighted);
        realized.push(c.realized);
        jumps += c.jumps;
    }
    let tail = tail_bound(spec, policy, cfg.horizon);
    Ok(Evaluation {
        intensity_weighted: CostEstimate::from_samples(&weighted, tail, cfg.horizon),
        realized: CostEstimate::from_samples(&realized, tail, cfg.horizon),
        mean_jumps: jumps as f64 / cfg.batch as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub x0: f64,
    pub estimate: CostEstimate,
    pub fd_value: f64,
}

/// `x0,estimate,stderr,n_paths,fd_value,inside_ci` rows.
pub fn write_report<W: std::io::Write>(mut w: W, rows: &[EvalRow]) -> std::io::Result<()> {
    writeln!(w, "x0,estimate,stderr,n_paths,fd_value,inside_ci")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(r.x0),
            fmt_f64(r.estimate.mean),
            fmt_f64(r.estimate.std_err),
            r.estimate.n,
            fmt_f64(r.fd_value),
            r.estimate.contains(r.fd_value)
        )?;
    }
    Ok(())
}
