//! Euler–Maruyama simulation of the uncontrolled diffusion and the discrete
//! survival process.
//!
//! Randomness comes from ChaCha streams keyed by `(seed, stream_id)`: path
//! `b` always draws its diffusion noise from stream `2b` and its control
//! randomness (thinning, jumps) from stream `2b + 1`, so results do not
//! depend on how paths are scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Counter-based random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { inner }
    }

    /// Diffusion noise of path `b`.
    pub fn diffusion(seed: u64, path: u64) -> Self {
        Self::new(seed, 2 * path)
    }

    /// Thinning and jump randomness of path `b`.
    pub fn control(seed: u64, path: u64) -> Self {
        Self::new(seed, 2 * path + 1)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    Point(f64),
    Uniform { lo: f64, hi: f64 },
}

impl InitialState {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            InitialState::Point(x) => x,
            InitialState::Uniform { lo, hi } => {
                Uniform::new_inclusive(lo, hi).expect("checked bounds").sample(rng)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub batch: usize,
    pub seed: u64,
    pub x0: InitialState,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 20.0,
            batch: 64,
            seed: 0,
            x0: InitialState::Uniform { lo: -4.0, hi: 4.0 },
        }
    }
}

impl SimConfig {
    /// Number of steps `M = T/Δt`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {}", self.dt));
        }
        if !(self.horizon > 0.0) || self.steps() == 0 {
            return bad(format!("horizon = {}", self.horizon));
        }
        if (self.steps() as f64 * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return bad(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if let InitialState::Uniform { lo, hi } = self.x0 {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("initial interval [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// One Euler–Maruyama step.
#[inline]
pub fn euler_step(spec: &ModelSpec, x: f64, dt: f64, sqrt_dt: f64, noise: f64) -> f64 {
    x + spec.b(x) * dt + spec.sigma(x) * sqrt_dt * noise
}

/// `B` paths of `M + 1` states, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    states: Vec<f64>,
    batch: usize,
    steps: usize,
    pub seed: u64,
    /// Normal increments drawn across the batch.
    pub increments: usize,
}

impl PathBatch {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn path(&self, b: usize) -> &[f64] {
        &self.states[b * (self.steps + 1)..(b + 1) * (self.steps + 1)]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks(self.steps + 1)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// `path_id,t,x` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, dt: f64) -> std::io::Result<()> {
        use crate::grid::fmt_f64;
        writeln!(w, "path_id,t,x")?;
        for (b, path) in self.paths().enumerate() {
            for (i, x) in path.iter().enumerate() {
                writeln!(w, "{b},{},{}", fmt_f64(i as f64 * dt), fmt_f64(*x))?;
            }
        }
        Ok(())
    }
}

/// Simulates a single uncontrolled path of `steps` steps from the diffusion
/// stream of path `b`; the initial state is drawn from the same stream.
pub fn simulate_path(spec: &ModelSpec, cfg: &SimConfig, b: usize, out: &mut Vec<f64>) {
    let mut rng = RngStream::diffusion(cfg.seed, b as u64);
    let (dt, sqrt_dt) = (cfg.dt, cfg.dt.sqrt());
    let mut x = cfg.x0.sample(&mut rng);
    out.clear();
    out.push(x);
    for _ in 0..cfg.steps() {
        x = euler_step(spec, x, dt, sqrt_dt, rng.normal());
        out.push(x);
    }
}

pub fn simulate_uncontrolled(spec: &ModelSpec, cfg: &SimConfig) -> Result<PathBatch> {
    cfg.validate()?;
    let steps = cfg.steps();
    let mut states = Vec::with_capacity(cfg.batch * (steps + 1));
    let mut row = Vec::with_capacity(steps + 1);
    for b in 0..cfg.batch {
        simulate_path(spec, cfg, b, &mut row);
        states.extend_from_slice(&row);
    }
    if states.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simulated path"));
    }
    Ok(PathBatch {
        states,
        batch: cfg.batch,
        steps,
        seed: cfg.seed,
        increments: cfg.batch * steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalWeights {
    /// `B × (M + 1)`, row-major.
    pub weights: Vec<f64>,
    /// Steps where `π·Δt > 1` forced the factor to zero.
    pub floored: usize,
}

/// `p₀ = 1`, `pᵢ₊₁ = (1 − π(Xᵢ)Δt)·pᵢ` with the factor floored at zero.
pub fn survival_weights(
    paths: &PathBatch,
    pi: impl Fn(f64) -> f64,
    dt: f64,
) -> Result<SurvivalWeights> {
    let mut weights = Vec::with_capacity(paths.states.len());
    let mut floored = 0;
    for path in paths.paths() {
        let mut p = 1.0;
        weights.push(p);
        for &x in &path[..path.len() - 1] {
            let rate = pi(x);
            if !(rate >= 0.0) {
                return Err(Error::NegativeIntensity(rate));
            }
            let factor = 1.0 - rate * dt;
            if factor < 0.0 {
                floored += 1;
            }
            p *= factor.max(0.0);
            weights.push(p);
        }
    }
    Ok(SurvivalWeights { weights, floored })
}
