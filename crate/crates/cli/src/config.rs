//! Run configuration: a TOML file of flat key-value sections.
//!
//! `[model]` and `[lambda]` are required and every key in them must be
//! present; the remaining sections fall back to the benchmark defaults.
//! Unknown keys anywhere are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use impulse_core::fixed_point::OuterConfig;
use impulse_core::grid::Grid1D;
use impulse_core::model::{Coefficient, InterventionCost, LambdaPair, ModelSpec, RunningCost};
use impulse_core::nonlocal::{JumpSearch, QuadratureRule};
use impulse_core::sde::{InitialState, SimConfig};
use impulse_core::td::{GradientMode, TrainConfig};

use crate::CliError;

/// A coefficient is a number, `{ slope, intercept }` or
/// `{ knots, values }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum CoefficientConfig {
    Constant(f64),
    Affine { slope: f64, intercept: f64 },
    PiecewiseLinear { knots: Vec<f64>, values: Vec<f64> },
}

impl From<&CoefficientConfig> for Coefficient {
    fn from(c: &CoefficientConfig) -> Self {
        match c {
            CoefficientConfig::Constant(v) => Coefficient::Constant(*v),
            CoefficientConfig::Affine { slope, intercept } => Coefficient::Affine {
                slope: *slope,
                intercept: *intercept,
            },
            CoefficientConfig::PiecewiseLinear { knots, values } => Coefficient::PiecewiseLinear {
                knots: knots.clone(),
                values: values.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub drift: CoefficientConfig,
    pub volatility: CoefficientConfig,
    pub sigma_floor: f64,
    pub discount: f64,
    /// `f(x) = h·x⁺ + p·x⁻`.
    pub h: f64,
    pub p: f64,
    pub fixed_up: f64,
    pub fixed_down: f64,
    pub prop_up: f64,
    pub prop_down: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x_min: -8.0,
            x_max: 8.0,
            nodes: 1601,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub tol_newton: f64,
    pub quadrature_nodes: usize,
    pub quadrature_half_width: f64,
    pub jump_search_half_width: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let outer = OuterConfig::default();
        Self {
            tol_outer: outer.tol_outer,
            max_outer: outer.max_outer,
            tol_newton: outer.tol_newton,
            quadrature_nodes: QuadratureRule::DEFAULT_NODES,
            quadrature_half_width: QuadratureRule::DEFAULT_HALF_WIDTH,
            jump_search_half_width: JumpSearch::default().half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub batch: usize,
    /// Initial states are uniform on `[x0_min, x0_max]`; equal bounds give
    /// a point mass.
    pub x0_min: f64,
    pub x0_max: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 20.0,
            batch: 64,
            x0_min: -4.0,
            x0_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub outer_iters: usize,
    pub inner_steps: usize,
    /// Defaults to `0.5/dt`.
    pub pi_max: Option<f64>,
    pub mc_jump_samples: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub input_scale: f64,
    pub output_scale: f64,
    /// `"semi"` or `"residual"`.
    pub gradient: String,
    pub reset_optimizer: bool,
    /// Final inner steps averaged into the reported network; 0 disables.
    pub average_tail: usize,
    pub prefit_tol: f64,
    pub prefit_max_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            outer_iters: t.outer_iters,
            inner_steps: t.inner_steps,
            pi_max: None,
            mc_jump_samples: t.mc_jump_samples,
            minibatch: t.minibatch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            hidden: t.sizes[1..t.sizes.len() - 1].to_vec(),
            input_scale: t.input_scale,
            output_scale: t.output_scale,
            gradient: "semi".into(),
            reset_optimizer: t.reset_optimizer,
            average_tail: t.average_tail,
            prefit_tol: t.prefit_tol,
            prefit_max_steps: t.prefit_max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub x0: Vec<f64>,
    pub paths: usize,
    pub horizon: f64,
    /// Evaluate the never-intervene policy against the Feynman–Kac value.
    pub zero_intensity: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            x0: vec![-2.0, 0.0, 2.0],
            paths: 10_000,
            horizon: 80.0,
            zero_intensity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Diagonal pairs `(λ, λ)`.
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Anchor of the reported jump law.
    pub jump_anchor: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: vec![1.0, 0.5, 0.1, 0.05],
            sigmas: vec![0.1, 0.2, 0.3, 0.4],
            jump_anchor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub lambda: LambdaSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn benchmark() -> Self {
        let spec = ModelSpec::benchmark();
        let c = spec.intervention_cost;
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            model: ModelSection {
                drift: CoefficientConfig::Constant(0.03),
                volatility: CoefficientConfig::Constant(0.2),
                sigma_floor: spec.sigma_floor,
                discount: spec.discount,
                h: 1.0,
                p: 1.0,
                fixed_up: c.fixed_up,
                fixed_down: c.fixed_down,
                prop_up: c.prop_up,
                prop_down: c.prop_down,
            },
            lambda: LambdaSection {
                lambda1: 0.5,
                lambda2: 0.5,
            },
            grid: GridSection::default(),
            solver: SolverSection::default(),
            sim: SimSection::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# cannot serialize: {e}\n"))
    }

    pub fn spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            drift: (&m.drift).into(),
            volatility: (&m.volatility).into(),
            sigma_floor: m.sigma_floor,
            discount: m.discount,
            running_cost: RunningCost::Asymmetric { h: m.h, p: m.p },
            intervention_cost: InterventionCost {
                fixed_up: m.fixed_up,
                fixed_down: m.fixed_down,
                prop_up: m.prop_up,
                prop_down: m.prop_down,
            },
        }
    }

    pub fn lambda(&self) -> Result<LambdaPair, CliError> {
        Ok(LambdaPair::new(self.lambda.lambda1, self.lambda.lambda2)?)
    }

    pub fn grid(&self) -> Result<Grid1D, CliError> {
        Ok(Grid1D::new(self.grid.x_min, self.grid.x_max, self.grid.nodes)?)
    }

    pub fn rule(&self) -> Result<QuadratureRule, CliError> {
        Ok(QuadratureRule::normal_trapezoid(
            self.solver.quadrature_nodes,
            self.solver.quadrature_half_width,
        )?)
    }

    pub fn outer(&self) -> Result<OuterConfig, CliError> {
        Ok(OuterConfig {
            tol_outer: self.solver.tol_outer,
            max_outer: self.solver.max_outer,
            tol_newton: self.solver.tol_newton,
            rule: self.rule()?,
            search: JumpSearch {
                half_width: self.solver.jump_search_half_width,
                ..JumpSearch::default()
            },
        })
    }

    pub fn sim(&self) -> SimConfig {
        let s = &self.sim;
        let x0 = if s.x0_min == s.x0_max {
            InitialState::Point(s.x0_min)
        } else {
            InitialState::Uniform {
                lo: s.x0_min,
                hi: s.x0_max,
            }
        };
        SimConfig {
            dt: s.dt,
            horizon: s.horizon,
            batch: s.batch,
            seed: self.seed,
            x0,
        }
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let sim = self.sim();
        let gradient = match t.gradient.as_str() {
            "semi" => GradientMode::SemiGradient,
            "residual" => GradientMode::Residual,
            other => {
                return Err(CliError::Parse(format!(
                    "train.gradient must be \"semi\" or \"residual\", got {other:?}"
                )))
            }
        };
        let mut sizes = vec![1];
        sizes.extend(&t.hidden);
        sizes.push(1);
        let cfg = TrainConfig {
            outer_iters: t.outer_iters,
            inner_steps: t.inner_steps,
            pi_max: t.pi_max.unwrap_or(0.5 / sim.dt),
            mc_jump_samples: t.mc_jump_samples,
            minibatch: t.minibatch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            sizes,
            input_scale: t.input_scale,
            output_scale: t.output_scale,
            gradient,
            reset_optimizer: t.reset_optimizer,
            average_tail: t.average_tail,
            prefit_tol: t.prefit_tol,
            prefit_max_steps: t.prefit_max_steps,
            report_window: TrainConfig::default().report_window,
            sim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
