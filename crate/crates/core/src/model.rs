//! Problem data for a one-dimensional impulse-control problem.
//!
//! A [`ModelSpec`] bundles the uncontrolled dynamics `dX = b(X) dt + σ(X) dW`,
//! the discount rate, the running cost `f` and the intervention cost `l`.
//! Every descriptor belongs to a closed family (constant, affine,
//! piecewise-linear) so that Lipschitz constants are exact.

use crate::error::{Error, Result};

/// A scalar function of the state, restricted to a family whose Lipschitz
/// constant is known exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    Affine { slope: f64, intercept: f64 },
    /// Linear interpolation between `(knots[i], values[i])`, continued
    /// linearly past the end knots with the end-segment slopes.
    PiecewiseLinear { knots: Vec<f64>, values: Vec<f64> },
}

impl Coefficient {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Affine { slope, intercept } => intercept + slope * x,
            Coefficient::PiecewiseLinear { knots, values } => {
                let n = knots.len();
                if n == 1 {
                    return values[0];
                }
                // segment index, clamped so the end segments extrapolate
                let seg = match knots.partition_point(|&k| k <= x) {
                    0 => 0,
                    i if i >= n => n - 2,
                    i => i - 1,
                };
                let (x0, x1) = (knots[seg], knots[seg + 1]);
                let (y0, y1) = (values[seg], values[seg + 1]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Affine { slope, .. } => slope.abs(),
            Coefficient::PiecewiseLinear { knots, values } => knots
                .windows(2)
                .zip(values.windows(2))
                .map(|(k, v)| ((v[1] - v[0]) / (k[1] - k[0])).abs())
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        let ok = match self {
            Coefficient::Constant(c) => finite(*c),
            Coefficient::Affine { slope, intercept } => finite(*slope) && finite(*intercept),
            Coefficient::PiecewiseLinear { knots, values } => {
                !knots.is_empty()
                    && knots.len() == values.len()
                    && knots.iter().chain(values).all(|v| v.is_finite())
                    && knots.windows(2).all(|w| w[0] < w[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("malformed {what} descriptor")))
        }
    }

    fn is_bounded(&self) -> bool {
        self.lipschitz() == 0.0
    }
}

/// Running cost `f`.
#[derive(Debug, Clone, PartialEq)]
pub enum RunningCost {
    /// `f(x) = h·x⁺ + p·x⁻`.
    Asymmetric { h: f64, p: f64 },
    General(Coefficient),
}

impl RunningCost {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            RunningCost::Asymmetric { h, p } => {
                if x >= 0.0 {
                    h * x
                } else {
                    -p * x
                }
            }
            RunningCost::General(c) => c.eval(x),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            RunningCost::Asymmetric { h, p } => h.max(*p),
            RunningCost::General(c) => c.lipschitz(),
        }
    }
}

/// Intervention cost `l(ξ) = K₊ + k₊ξ` for `ξ ≥ 0` and `K₋ − k₋ξ` for `ξ < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionCost {
    pub fixed_up: f64,
    pub fixed_down: f64,
    pub prop_up: f64,
    pub prop_down: f64,
}

impl InterventionCost {
    pub fn symmetric(fixed: f64, prop: f64) -> Self {
        Self {
            fixed_up: fixed,
            fixed_down: fixed,
            prop_up: prop,
            prop_down: prop,
        }
    }

    #[inline]
    pub fn eval(&self, xi: f64) -> f64 {
        if xi >= 0.0 {
            self.fixed_up + self.prop_up * xi
        } else {
            self.fixed_down - self.prop_down * xi
        }
    }

    /// Infimum of `l`, the fixed cost `K`.
    pub fn min_cost(&self) -> f64 {
        self.fixed_up.min(self.fixed_down)
    }

    pub fn lipschitz(&self) -> f64 {
        self.prop_up.max(self.prop_down)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub drift: Coefficient,
    pub volatility: Coefficient,
    /// Declared lower bound `σ0` of the volatility.
    pub sigma_floor: f64,
    pub discount: f64,
    pub running_cost: RunningCost,
    pub intervention_cost: InterventionCost,
}

impl ModelSpec {
    /// Constant drift 0.03, volatility 0.2, discount 0.1, `f(x) = |x|`,
    /// `l(ξ) = 2 + 0.5|ξ|`.
    pub fn benchmark() -> Self {
        Self {
            drift: Coefficient::Constant(0.03),
            volatility: Coefficient::Constant(0.2),
            sigma_floor: 0.2,
            discount: 0.1,
            running_cost: RunningCost::Asymmetric { h: 1.0, p: 1.0 },
            intervention_cost: InterventionCost::symmetric(2.0, 0.5),
        }
    }

    /// Checks that every descriptor is well formed.
    pub fn check_descriptors(&self) -> Result<()> {
        self.drift.validate("drift")?;
        self.volatility.validate("volatility")?;
        if let RunningCost::General(c) = &self.running_cost {
            c.validate("running cost")?;
        }
        let l = &self.intervention_cost;
        let scalars = [
            ("discount", self.discount),
            ("sigma floor", self.sigma_floor),
            ("K+", l.fixed_up),
            ("K-", l.fixed_down),
            ("k+", l.prop_up),
            ("k-", l.prop_down),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} is not finite")));
            }
        }
        if let RunningCost::Asymmetric { h, p } = self.running_cost {
            if !(h.is_finite() && p.is_finite()) {
                return Err(Error::InvalidSpec("running cost slopes not finite".into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        self.running_cost.eval(x)
    }

    #[inline]
    pub fn l(&self, xi: f64) -> f64 {
        self.intervention_cost.eval(xi)
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        self.volatility.eval(x)
    }

    /// Joint Lipschitz constant `L` of `(b, σ)`.
    pub fn lip_b_sigma(&self) -> f64 {
        self.drift.lipschitz().max(self.volatility.lipschitz())
    }

    pub fn lip_f(&self) -> f64 {
        self.running_cost.lipschitz()
    }

    pub fn lip_l(&self) -> f64 {
        self.intervention_cost.lipschitz()
    }

    /// `G = L + L²/2`.
    pub fn growth(&self) -> f64 {
        let l = self.lip_b_sigma();
        l + 0.5 * l * l
    }

    /// Lipschitz bound `L_f / (r − G)` shared by all value iterates.
    /// Infinite when `r ≤ G`.
    pub fn value_lipschitz(&self) -> f64 {
        let gap = self.discount - self.growth();
        if gap > 0.0 {
            self.lip_f() / gap
        } else {
            f64::INFINITY
        }
    }
}

/// Randomization strengths: `lambda1` for the intervention time, `lambda2`
/// for the jump size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LambdaPair {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if lambda1 > 0.0 && lambda1.is_finite() && lambda2 > 0.0 && lambda2.is_finite() {
            Ok(Self { lambda1, lambda2 })
        } else {
            Err(Error::InvalidConfig(format!(
                "lambda pair ({lambda1}, {lambda2}) must be strictly positive"
            )))
        }
    }

    pub fn diagonal(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Slack of the condition (zero or negative when violated).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, passed: bool, margin: f64) {
        self.checks.push(Check {
            name,
            passed,
            margin,
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag}  {:<32} margin {:+.6e}", c.name, c.margin)?;
        }
        for w in &self.warnings {
            writeln!(f, "WARN  {w}")?;
        }
        Ok(())
    }
}

pub const CHECK_ELLIPTIC: &str = "uniform ellipticity";
pub const CHECK_F_ZERO: &str = "f(0) = 0";
pub const CHECK_F_NONNEG: &str = "f >= 0";
pub const CHECK_L_MIN: &str = "l(0) = min l = K > 0";
pub const CHECK_L_SUBADD: &str = "l subadditive with K";
pub const CHECK_DISCOUNT: &str = "r - G in (0, L_f/L_l)";
pub const CHECK_GROWTH_H: &str = "h - r k- > 0";
pub const CHECK_GROWTH_P: &str = "p - r k+ > 0";

/// State points at which pointwise conditions are sampled.
fn sample_points() -> impl Iterator<Item = f64> {
    (0..=1600).map(|i| -8.0 + 0.01 * i as f64)
}

/// Deterministic `100 × 100` pair grid on `[-10, 10]²`.
fn sample_pairs() -> impl Iterator<Item = (f64, f64)> {
    let axis = |i: usize| -10.0 + 20.0 * i as f64 / 99.0;
    (0..100).flat_map(move |i| (0..100).map(move |j| (axis(i), axis(j))))
}

/// Checks the standing assumptions on `spec`. Failures are reported in the
/// returned report; only malformed descriptors produce an error.
pub fn validate_assumptions(spec: &ModelSpec) -> Result<ValidationReport> {
    spec.check_descriptors()?;
    let mut report = ValidationReport::default();

    let sigma_min = sample_points()
        .map(|x| spec.sigma(x).abs())
        .fold(f64::INFINITY, f64::min);
    let floor = spec.sigma_floor;
    report.push(
        CHECK_ELLIPTIC,
        floor > 0.0 && sigma_min >= floor,
        (sigma_min - floor).min(floor),
    );

    let f0 = spec.f(0.0);
    report.push(CHECK_F_ZERO, f0 == 0.0, -f0.abs());
    let f_min = sample_points().map(|x| spec.f(x)).fold(f64::INFINITY, f64::min);
    report.push(CHECK_F_NONNEG, f_min >= 0.0, f_min);

    let l = &spec.intervention_cost;
    let k = l.min_cost();
    let l0 = spec.l(0.0);
    report.push(CHECK_L_MIN, l0 == k && k > 0.0, k - (l0 - k).abs());

    let subadd = sample_pairs()
        .map(|(x, y)| spec.l(x) + spec.l(y) - spec.l(x + y) - k)
        .fold(f64::INFINITY, f64::min);
    report.push(CHECK_L_SUBADD, subadd >= -1e-12, subadd);

    let gap = spec.discount - spec.growth();
    let upper = if spec.lip_l() > 0.0 {
        spec.lip_f() / spec.lip_l()
    } else {
        f64::INFINITY
    };
    let margin = gap.min(upper - gap);
    report.push(CHECK_DISCOUNT, margin > 0.0, margin);

    if let RunningCost::Asymmetric { h, p } = spec.running_cost {
        let mh = h - spec.discount * l.prop_down;
        let mp = p - spec.discount * l.prop_up;
        report.push(CHECK_GROWTH_H, mh > 0.0, mh);
        report.push(CHECK_GROWTH_P, mp > 0.0, mp);
    }

    let f_bounded = matches!(&spec.running_cost, RunningCost::General(c) if c.is_bounded());
    if !f_bounded {
        report
            .warnings
            .push("running cost is unbounded; geometric-rate guarantees assume bounded f".into());
    }
    Ok(report)
}
