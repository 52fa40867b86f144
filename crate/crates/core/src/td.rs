//! Model-free temporal-difference training of a value network.
//!
//! Each outer iteration freezes a snapshot `ψⁿ` of the network, simulates
//! fresh uncontrolled paths, estimates `M^{λ₂}ψⁿ` at every visited state by
//! Monte Carlo and then runs `K` AdamW steps on the squared TD error. The
//! parameters carry over between outer iterations.

use std::io::{Read, Write};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fd::{discretize_generator, solve_feynman_kac};
use crate::grid::{fmt_f64, Grid1D, GridFn};
use crate::model::{LambdaPair, ModelSpec};
use crate::policy_eval::entropy_r;
use crate::sde::{simulate_uncontrolled, RngStream, SimConfig};

/// Feed-forward network `ℝ → ℝ` with tanh hidden layers and output
/// `scale·softplus(z)`, so `ψ_θ ≥ 0`.
///
/// Parameters are stored flat, layer by layer, each as a row-major weight
/// matrix `out × in` followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// Inputs are mapped to `x / input_scale`.
    pub input_scale: f64,
    pub output_scale: f64,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ValueNet {
    pub const DEFAULT_SIZES: [usize; 5] = [1, 64, 64, 64, 1];

    /// Glorot-uniform weights and zero biases.
    pub fn new(sizes: &[usize], input_scale: f64, output_scale: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes[0] != 1 || sizes[sizes.len() - 1] != 1 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("layer sizes {sizes:?}")));
        }
        if !(input_scale > 0.0 && output_scale > 0.0) {
            return Err(Error::InvalidConfig("network scales must be positive".into()));
        }
        let mut rng = RngStream::new(seed, u64::MAX);
        let mut params = Vec::with_capacity(Self::count(sizes));
        for w in sizes.windows(2) {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| a * (2.0 * rng.uniform() - 1.0)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            input_scale,
            output_scale,
        })
    }

    pub fn from_params(
        sizes: &[usize],
        params: Vec<f64>,
        input_scale: f64,
        output_scale: f64,
    ) -> Result<Self> {
        let mut net = Self::new(sizes, input_scale, output_scale, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameters for layer sizes {sizes:?}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        net.params = params;
        Ok(net)
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Offsets of (weights, bias) of each layer in the flat vector.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wo = off;
            off += fan_in * fan_out + fan_out;
            (fan_in, fan_out, wo, wo + fan_in * fan_out)
        })
    }

    pub fn forward(&self, x: f64) -> f64 {
        let mut ws = Workspace::default();
        self.forward_batch(&[x], &mut ws)[0]
    }

    /// Evaluates a batch; activations are kept in `ws` for
    /// [`ValueNet::backward_batch`].
    pub fn forward_batch<'w>(&self, xs: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        let n = xs.len();
        let n_layers = self.sizes.len() - 1;
        ws.acts.resize_with(n_layers + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend(xs.iter().map(|x| x / self.input_scale));
        for (l, (fan_in, fan_out, wo, bo)) in self.layers().enumerate() {
            let (done, rest) = ws.acts.split_at_mut(l + 1);
            let input = &done[l];
            let out = &mut rest[0];
            out.clear();
            out.resize(fan_out * n, 0.0);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + fan_out];
            for j in 0..fan_out {
                let row = &mut out[j * n..(j + 1) * n];
                row.fill(b[j]);
                for k in 0..fan_in {
                    let wjk = w[j * fan_in + k];
                    let a = &input[k * n..(k + 1) * n];
                    for (o, &ai) in row.iter_mut().zip(a) {
                        *o += wjk * ai;
                    }
                }
                if l + 1 < n_layers {
                    row.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
        }
        let z = &ws.acts[n_layers];
        ws.out.clear();
        ws.out
            .extend(z.iter().map(|&z| self.output_scale * softplus(z)));
        &ws.out
    }

    /// Adds `Σ_s upstream[s]·∂ψ(x_s)/∂θ` to `grad`, using the activations of
    /// the last [`ValueNet::forward_batch`] call on `ws`.
    pub fn backward_batch(&self, ws: &mut Workspace, upstream: &[f64], grad: &mut [f64]) {
        let n = upstream.len();
        let n_layers = self.sizes.len() - 1;
        let mut delta: Vec<f64> = ws.acts[n_layers]
            .iter()
            .zip(upstream)
            .map(|(&z, &g)| g * self.output_scale * sigmoid(z))
            .collect();
        let layers: Vec<_> = self.layers().collect();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out, wo, bo) = layers[l];
            let input = &ws.acts[l];
            for j in 0..fan_out {
                let d = &delta[j * n..(j + 1) * n];
                grad[bo + j] += d.iter().sum::<f64>();
                for k in 0..fan_in {
                    let a = &input[k * n..(k + 1) * n];
                    grad[wo + j * fan_in + k] += d.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wo..bo];
            let prev = &mut ws.scratch;
            prev.clear();
            prev.resize(fan_in * n, 0.0);
            for j in 0..fan_out {
                let d = &delta[j * n..(j + 1) * n];
                for k in 0..fan_in {
                    let wjk = w[j * fan_in + k];
                    let p = &mut prev[k * n..(k + 1) * n];
                    for (pi, &di) in p.iter_mut().zip(d) {
                        *pi += wjk * di;
                    }
                }
            }
            // through tanh: a' = 1 − a²
            for (p, &a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            std::mem::swap(&mut delta, prev);
        }
    }

    /// `∂ψ(x)/∂θ`.
    pub fn gradient(&self, x: f64) -> Vec<f64> {
        let mut ws = Workspace::default();
        let mut g = vec![0.0; self.params.len()];
        self.forward_batch(&[x], &mut ws);
        self.backward_batch(&mut ws, &[1.0], &mut g);
        g
    }

    /// Samples the network on a grid.
    pub fn tabulate(&self, grid: Grid1D, slope_clamp: f64) -> Result<GridFn> {
        let xs: Vec<f64> = grid.nodes().collect();
        let mut ws = Workspace::default();
        let values = self.forward_batch(&xs, &mut ws).to_vec();
        GridFn::new(grid, values, slope_clamp)
    }

    /// Product of the spectral norms of the weight matrices times the
    /// output-map slope bound: a Lipschitz bound for `x ↦ ψ(x)`.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut bound = self.output_scale / self.input_scale;
        for (fan_in, fan_out, wo, bo) in self.layers() {
            bound *= spectral_norm(&self.params[wo..bo], fan_out, fan_in);
        }
        bound
    }

    const MAGIC: &'static [u8; 8] = b"RIMPNET\0";
    const VERSION: u32 = 1;

    /// Little-endian checkpoint: magic, version, layer sizes, scales and
    /// the flat parameter vector.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        w.write_all(&self.input_scale.to_le_bytes())?;
        w.write_all(&self.output_scale.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            Ok(buf)
        }
        if &take::<8, _>(&mut r)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_sizes = u32::from_le_bytes(take(&mut r)?) as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!("{n_sizes} layer sizes")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = u64::from_le_bytes(take(&mut r)?);
            if s == 0 || s > 1 << 16 {
                return Err(Error::Checkpoint(format!("layer size {s}")));
            }
            sizes.push(s as usize);
        }
        let input_scale = f64::from_le_bytes(take(&mut r)?);
        let output_scale = f64::from_le_bytes(take(&mut r)?);
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        if count != Self::count(&sizes) {
            return Err(Error::Checkpoint(format!(
                "{count} parameters for layer sizes {sizes:?}"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(f64::from_le_bytes(take(&mut r)?));
        }
        Self::from_params(&sizes, params, input_scale, output_scale)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u: Vec<f64> = (0..rows)
            .map(|j| (0..cols).map(|k| w[j * cols + k] * v[k]).sum())
            .collect();
        let mut next: Vec<f64> = (0..cols)
            .map(|k| (0..rows).map(|j| w[j * cols + k] * u[j]).sum())
            .collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let s = norm.sqrt();
        let done = (s - sigma).abs() <= 1e-12 * s;
        sigma = s;
        v = next;
        if done {
            break;
        }
    }
    sigma
}

/// Buffers reused across batched forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    scratch: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * ((*m / c1) / ((*v / c2).sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

/// How the TD loss is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Gradient through `ψ_θ(x_i)` only; the bootstrap term and `π` are
    /// held fixed.
    #[default]
    SemiGradient,
    /// Full gradient of the mean squared TD error.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub pi_max: f64,
    pub mc_jump_samples: usize,
    /// Transitions per inner gradient step, drawn from the `B × M` pool.
    pub minibatch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sizes: Vec<usize>,
    pub input_scale: f64,
    pub output_scale: f64,
    pub gradient: GradientMode,
    /// Restart the AdamW moments at every outer iteration. The targets
    /// change between outer iterations, and the second-moment memory
    /// (about 1000 steps) otherwise carries the large early gradients into
    /// later, much quieter problems.
    pub reset_optimizer: bool,
    /// Number of final inner steps whose parameters are averaged into the
    /// network that serves as the next snapshot and as the reported value
    /// function. The optimizer itself continues from its raw iterate.
    /// Zero disables averaging.
    pub average_tail: usize,
    /// Pre-fit target: relative L² error against `ψ⁰`.
    pub prefit_tol: f64,
    pub prefit_max_steps: usize,
    /// Window for the relative error against a reference.
    pub report_window: (f64, f64),
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            outer_iters: 30,
            inner_steps: 400,
            pi_max: 0.5 / sim.dt,
            mc_jump_samples: 512,
            minibatch: 512,
            lr: 1e-3,
            weight_decay: 1e-4,
            sizes: ValueNet::DEFAULT_SIZES.to_vec(),
            input_scale: 4.0,
            output_scale: 4.0,
            gradient: GradientMode::SemiGradient,
            reset_optimizer: true,
            average_tail: 200,
            prefit_tol: 1e-3,
            prefit_max_steps: 20_000,
            report_window: (-3.0, 3.0),
            sim,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.outer_iters == 0 || self.inner_steps == 0 || self.minibatch == 0 {
            return bad("iteration counts must be positive".into());
        }
        if self.average_tail > self.inner_steps {
            return bad(format!(
                "average_tail = {} exceeds inner_steps = {}",
                self.average_tail, self.inner_steps
            ));
        }
        if self.mc_jump_samples < 2 {
            return bad(format!("mc_jump_samples = {}", self.mc_jump_samples));
        }
        if !(self.pi_max > 0.0 && self.pi_max * self.sim.dt < 1.0) {
            return bad(format!("pi_max = {} with dt = {}", self.pi_max, self.sim.dt));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate must be positive".into());
        }
        if !(self.prefit_tol > 0.0) {
            return bad("prefit_tol must be positive".into());
        }
        if self.report_window.0 >= self.report_window.1 {
            return bad("empty report window".into());
        }
        ValueNet::new(&self.sizes, self.input_scale, self.output_scale, 0).map(|_| ())
    }
}

/// `M^{λ₂}ψ(x)` from `n` draws `ζ ∼ N(−x, 1)`, as a shifted log-mean-exp.
pub fn mc_nonlocal_target(
    psi: impl Fn(f64) -> f64,
    spec: &ModelSpec,
    x: f64,
    lambda2: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: n_samples,
        });
    }
    let mut g = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let zeta = rng.normal() - x;
        g.push(psi(x + zeta) + spec.l(zeta));
    }
    Ok(log_mean_exp(&g, lambda2))
}

/// `m − λ log((1/n) Σ exp(−(gⱼ − m)/λ))`, `m = min gⱼ`.
fn log_mean_exp(g: &[f64], lambda: f64) -> f64 {
    let m = g.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = g.iter().map(|&gi| (-(gi - m) / lambda).exp()).sum();
    m - lambda * (s / g.len() as f64).ln()
}

/// `δ = ψ(xᵢ) − e^{−rΔt}(1 − πᵢΔt)ψ(xᵢ₊₁) − [f(xᵢ) + πᵢ m − λ₁𝓡(πᵢ)]Δt`.
#[allow(clippy::too_many_arguments)]
pub fn td_residual(
    net: &ValueNet,
    x_i: f64,
    x_next: f64,
    pi_i: f64,
    m_target: f64,
    spec: &ModelSpec,
    lambda1: f64,
    dt: f64,
) -> Result<f64> {
    let (v, v_next) = (net.forward(x_i), net.forward(x_next));
    td_error(v, v_next, pi_i, m_target, spec.f(x_i), spec.discount, lambda1, dt)
}

/// [`td_residual`] from the two values `ψ(xᵢ)`, `ψ(xᵢ₊₁)` and `f(xᵢ)`, for
/// any value representation.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn td_error(
    v: f64,
    v_next: f64,
    pi: f64,
    m: f64,
    f: f64,
    r: f64,
    lambda1: f64,
    dt: f64,
) -> Result<f64> {
    Ok(v - (-r * dt).exp() * (1.0 - pi * dt) * v_next - (f + pi * m - lambda1 * entropy_r(pi)?) * dt)
}

/// One sampled transition with its frozen nonlocal target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub x: f64,
    pub x_next: f64,
    pub m_target: f64,
}

/// Loss and gradient of the mean squared TD error over `batch`.
pub struct TdLoss<'a> {
    pub spec: &'a ModelSpec,
    pub lambda1: f64,
    pub dt: f64,
    pub pi_max: f64,
    pub mode: GradientMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub clamped: usize,
}

impl TdLoss<'_> {
    #[inline]
    fn intensity(&self, v: f64, m: f64) -> (f64, bool) {
        let pi = (-(m - v) / self.lambda1).exp();
        if pi >= self.pi_max {
            (self.pi_max, true)
        } else {
            (pi, false)
        }
    }

    /// Writes the gradient into `grad` (overwritten) and returns the loss.
    pub fn eval(
        &self,
        net: &ValueNet,
        batch: &[Transition],
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<LossStats> {
        let n = batch.len() as f64;
        let xs: Vec<f64> = batch.iter().map(|t| t.x).collect();
        let xn: Vec<f64> = batch.iter().map(|t| t.x_next).collect();
        let v_next = net.forward_batch(&xn, ws).to_vec();
        let mut ws_next = if self.mode == GradientMode::Residual {
            Some(ws.clone())
        } else {
            None
        };
        let v = net.forward_batch(&xs, ws).to_vec();
        let disc = (-self.spec.discount * self.dt).exp();
        let mut up = vec![0.0; batch.len()];
        let mut up_next = vec![0.0; batch.len()];
        let mut stats = LossStats::default();
        for (s, t) in batch.iter().enumerate() {
            let (pi, clamped) = self.intensity(v[s], t.m_target);
            stats.clamped += clamped as usize;
            let f = self.spec.f(t.x);
            let delta = td_error(v[s], v_next[s], pi, t.m_target, f, self.spec.discount, self.lambda1, self.dt)?;
            stats.loss += delta * delta / n;
            let g = 2.0 * delta / n;
            up[s] = g;
            if self.mode == GradientMode::Residual {
                up_next[s] = -g * disc * (1.0 - pi * self.dt);
                if !clamped {
                    // δ depends on ψ(xᵢ) through π as well
                    let ln_pi = -(t.m_target - v[s]) / self.lambda1;
                    let d_pi = self.dt * (disc * v_next[s] - t.m_target - self.lambda1 * ln_pi);
                    up[s] += g * d_pi * pi / self.lambda1;
                }
            }
        }
        grad.fill(0.0);
        net.backward_batch(ws, &up, grad);
        if let Some(wn) = ws_next.as_mut() {
            net.backward_batch(wn, &up_next, grad);
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub outer: usize,
    /// Mean of the minibatch losses over the inner loop.
    pub mean_loss: f64,
    pub rel_l2: Option<f64>,
    /// Fraction of intensity evaluations that hit `pi_max`.
    pub clamp_fraction: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ValueNet,
    pub history: Vec<OuterRecord>,
    /// Relative L² error of the pre-fit against `ψ⁰`.
    pub prefit_error: f64,
}

impl TrainOutcome {
    /// `outer_iter,mean_loss,rel_l2_vs_reference,wallclock_s`; the error
    /// column is empty when no reference was supplied.
    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "outer_iter,mean_loss,rel_l2_vs_reference,wallclock_s")?;
        for h in &self.history {
            let rel = h.rel_l2.map(fmt_f64).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{}",
                h.outer,
                fmt_f64(h.mean_loss),
                rel,
                fmt_f64(h.wallclock_s)
            )?;
        }
        Ok(())
    }
}

/// Nodes of `reference` inside `window` against the network.
pub fn rel_l2_net(net: &ValueNet, reference: &GridFn, window: (f64, f64)) -> f64 {
    let idx: Vec<usize> = reference.grid().indices_within(window.0, window.1).collect();
    let xs: Vec<f64> = idx.iter().map(|&i| reference.grid().node(i)).collect();
    let mut ws = Workspace::default();
    let v = net.forward_batch(&xs, &mut ws);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        let r = reference.values()[i];
        num += (v[k] - r) * (v[k] - r);
        den += r * r;
    }
    (num / den).sqrt()
}

/// Supervised fit of `net` to `target` on its nodes inside `window`.
fn prefit(net: &mut ValueNet, target: &GridFn, window: (f64, f64), cfg: &TrainConfig) -> Result<f64> {
    // nodes about 0.05 apart are plenty for a smooth target
    let stride = ((0.05 / target.grid().step()).round() as usize).max(1);
    let idx: Vec<usize> = target
        .grid()
        .indices_within(window.0, window.1)
        .step_by(stride)
        .collect();
    let xs: Vec<f64> = idx.iter().map(|&i| target.grid().node(i)).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| target.values()[i]).collect();
    let den: f64 = ys.iter().map(|y| y * y).sum();
    let mut opt = AdamW::new(net.params().len(), 1e-2, 0.0);
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; net.params().len()];
    let mut err = f64::INFINITY;
    for step in 0..cfg.prefit_max_steps {
        let v = net.forward_batch(&xs, &mut ws).to_vec();
        let num: f64 = v.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum();
        err = (num / den).sqrt();
        if err < cfg.prefit_tol {
            break;
        }
        // cosine decay from 1e-2 to 1e-4
        let t = step as f64 / cfg.prefit_max_steps as f64;
        opt.lr = 1e-4 + 0.5 * (1e-2 - 1e-4) * (1.0 + (std::f64::consts::PI * t).cos());
        let up: Vec<f64> = v.iter().zip(&ys).map(|(a, b)| 2.0 * (a - b) / den).collect();
        grad.fill(0.0);
        net.backward_batch(&mut ws, &up, &mut grad);
        opt.step(net.params_mut(), &grad);
        if !net.is_finite() {
            return Err(Error::Diverged {
                outer: 0,
                reason: "non-finite parameters during pre-fit".into(),
            });
        }
    }
    Ok(err)
}

/// Per-outer-iteration seed, decorrelated from neighbours.
fn outer_seed(seed: u64, outer: usize) -> u64 {
    let mut z = seed ^ (outer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Grid on which the snapshot `ψⁿ` is tabulated for the Monte Carlo
/// targets; post-jump states are `N(0, 1)` so this covers them with room.
fn snapshot_grid() -> Grid1D {
    Grid1D::new(-10.0, 10.0, 4001).expect("static grid")
}

/// Runs the TD fixed-point loop. `reference`, if given, is tracked in the
/// history on `cfg.report_window`.
pub fn train(
    spec: &ModelSpec,
    lambda: LambdaPair,
    cfg: &TrainConfig,
    seed: u64,
    reference: Option<&GridFn>,
) -> Result<TrainOutcome> {
    train_observed(spec, lambda, cfg, seed, reference, |_, _| {})
}

/// [`train`] with a callback after every outer iteration.
pub fn train_observed(
    spec: &ModelSpec,
    lambda: LambdaPair,
    cfg: &TrainConfig,
    seed: u64,
    reference: Option<&GridFn>,
    mut observe: impl FnMut(&OuterRecord, &ValueNet),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.check_descriptors()?;
    let start = Instant::now();
    let dt = cfg.sim.dt;

    let fd_grid = Grid1D::benchmark();
    let psi0 = solve_feynman_kac(&discretize_generator(spec, &fd_grid), spec)?;
    let mut net = ValueNet::new(&cfg.sizes, cfg.input_scale, cfg.output_scale, seed)?;
    let prefit_window = match cfg.sim.x0 {
        crate::sde::InitialState::Uniform { lo, hi } => (lo.min(-4.0) - 2.0, hi.max(4.0) + 2.0),
        crate::sde::InitialState::Point(x) => (x.min(-4.0) - 2.0, x.max(4.0) + 2.0),
    };
    let prefit_error = prefit(&mut net, &psi0, prefit_window, cfg)?;

    let mut opt = AdamW::new(net.params().len(), cfg.lr, cfg.weight_decay);
    let loss = TdLoss {
        spec,
        lambda1: lambda.lambda1,
        dt,
        pi_max: cfg.pi_max,
        mode: cfg.gradient,
    };
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; net.params().len()];
    let mut history = Vec::with_capacity(cfg.outer_iters);
    let steps = cfg.sim.steps();
    // the averaged iterate; equals `net` when averaging is off
    let mut current = net.clone();
    let mut sum = vec![0.0; net.params().len()];

    for outer in 0..cfg.outer_iters {
        let seed_n = outer_seed(seed, outer);
        let snapshot = current.tabulate(snapshot_grid(), f64::INFINITY)?;
        let sim = SimConfig { seed: seed_n, ..cfg.sim };
        let paths = simulate_uncontrolled(spec, &sim)?;

        let mut pool = Vec::with_capacity(sim.batch * steps);
        for (b, path) in paths.paths().enumerate() {
            // the control stream of each path is unused by the uncontrolled
            // simulation and drives its Monte Carlo targets
            let mut rng = RngStream::control(seed_n, b as u64);
            for w in path.windows(2) {
                let m = mc_nonlocal_target(
                    |y| snapshot.eval(y),
                    spec,
                    w[0],
                    lambda.lambda2,
                    cfg.mc_jump_samples,
                    &mut rng,
                )?;
                pool.push(Transition {
                    x: w[0],
                    x_next: w[1],
                    m_target: m,
                });
            }
        }

        if cfg.reset_optimizer {
            opt = AdamW::new(net.params().len(), cfg.lr, cfg.weight_decay);
        }
        let mut picker = RngStream::new(seed_n, u64::MAX - 1);
        let mut batch = Vec::with_capacity(cfg.minibatch);
        let (mut loss_sum, mut clamped) = (0.0, 0usize);
        sum.fill(0.0);
        let tail_start = cfg.inner_steps - cfg.average_tail;
        for k in 0..cfg.inner_steps {
            batch.clear();
            batch.extend((0..cfg.minibatch).map(|_| pool[picker.index(pool.len())]));
            let stats = loss.eval(&net, &batch, &mut ws, &mut grad)?;
            if !(stats.loss <= 1e6) {
                return Err(Error::Diverged {
                    outer,
                    reason: format!("TD loss {}", stats.loss),
                });
            }
            opt.step(net.params_mut(), &grad);
            if !net.is_finite() {
                return Err(Error::Diverged {
                    outer,
                    reason: "non-finite parameters".into(),
                });
            }
            if k >= tail_start {
                for (s, p) in sum.iter_mut().zip(net.params()) {
                    *s += p;
                }
            }
            loss_sum += stats.loss;
            clamped += stats.clamped;
        }
        current = net.clone();
        if cfg.average_tail > 0 {
            let n = cfg.average_tail as f64;
            for (c, s) in current.params_mut().iter_mut().zip(&sum) {
                *c = s / n;
            }
        }
        let record = OuterRecord {
            outer,
            mean_loss: loss_sum / cfg.inner_steps as f64,
            rel_l2: reference.map(|r| rel_l2_net(&current, r, cfg.report_window)),
            clamp_fraction: clamped as f64 / (cfg.inner_steps * cfg.minibatch) as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        observe(&record, &current);
        history.push(record);
    }
    Ok(TrainOutcome {
        net: current,
        history,
        prefit_error,
    })
}
