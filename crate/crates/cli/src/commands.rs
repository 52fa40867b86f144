use std::io::Write;
use std::path::Path;

use impulse_core::fd::{discretize_generator, solve_feynman_kac};
use impulse_core::fixed_point::{
    continuation_interval, flat_region_width, lambda_sweep, solve_classical as classical_fixed_point, solve_randomized,
    SolveResult, SWEEP_WINDOW,
};
use impulse_core::grid::{fmt_f64, GridFn};
use impulse_core::model::{validate_assumptions, Coefficient, LambdaPair, ModelSpec};
use impulse_core::nonlocal::JumpGibbs;
use impulse_core::policy_eval::{evaluate as run_evaluation, write_report, EvalRow, RandomizedPolicy};
use impulse_core::sde::{InitialState, SimConfig};
use impulse_core::td::train as run_training;

use crate::config::RunConfig;
use crate::output::write_atomic;
use crate::CliError;

/// Threshold defining the flat region `{π* < 0.05·max π*}`.
const FLAT_FRACTION: f64 = 0.05;

fn warn_assumptions(spec: &ModelSpec) -> Result<(), CliError> {
    let report = validate_assumptions(spec)?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("warning: assumption not met: {} (margin {:e})", c.name, c.margin);
    }
    Ok(())
}

fn csv(dir: &Path, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let path = dir.join(name);
    write_atomic(&path, body)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let report = validate_assumptions(&cfg.spec())?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed("model assumptions not satisfied".into()))
    }
}

fn write_psi_lambda(dir: &Path, sol: &SolveResult) -> Result<(), CliError> {
    csv(dir, "psi_lambda.csv", |w| {
        writeln!(w, "x,psi,psi0,m_psi,pi_star")?;
        for (i, x) in sol.psi.grid().nodes().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(x),
                fmt_f64(sol.psi.values()[i]),
                fmt_f64(sol.psi0.values()[i]),
                fmt_f64(sol.m_psi.values()[i]),
                fmt_f64(sol.pi_star.values()[i])
            )?;
        }
        Ok(())
    })
}

pub fn solve_fd(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.spec();
    warn_assumptions(&spec)?;
    let sol = solve_randomized(&spec, cfg.lambda()?, &cfg.grid()?, &cfg.outer()?)?;
    write_psi_lambda(&cfg.out_dir, &sol)?;
    csv(&cfg.out_dir, "diagnostics.csv", |w| {
        writeln!(w, "n,d_n")?;
        for (n, d) in sol.iterates.iter().enumerate() {
            writeln!(w, "{n},{}", fmt_f64(*d))?;
        }
        Ok(())
    })?;
    println!("outer_iters {}", sol.outer_iters);
    println!("q_hat {} (r^2 {})", sol.q_hat, sol.r_squared);
    println!("residual {:e}", sol.residual);
    Ok(())
}

pub fn solve_classical(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.spec();
    warn_assumptions(&spec)?;
    let grid = cfg.grid()?;
    let sol = classical_fixed_point(&spec, &grid, &cfg.outer()?)?;
    let cont = sol.continuation.clone().unwrap_or_default();
    csv(&cfg.out_dir, "psi_classical.csv", |w| {
        writeln!(w, "x,psi,in_continuation")?;
        for (i, x) in grid.nodes().enumerate() {
            writeln!(w, "{},{},{}", fmt_f64(x), fmt_f64(sol.psi.values()[i]), cont[i] as u8)?;
        }
        Ok(())
    })?;
    println!("outer_iters {}", sol.outer_iters);
    match continuation_interval(&grid, &cont) {
        Some((d, u)) => println!("continuation interval [{d}, {u}]"),
        None => println!("continuation region is not a single interval"),
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    let spec = cfg.spec();
    let lambda = cfg.lambda()?;
    let tcfg = cfg.train()?;
    spec.check_descriptors()?;
    if dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    warn_assumptions(&spec)?;
    let grid = cfg.grid()?;
    let reference = solve_randomized(&spec, lambda, &grid, &cfg.outer()?)?;
    let out = run_training(&spec, lambda, &tcfg, cfg.seed, Some(&reference.psi))?;
    csv(&cfg.out_dir, "training_log.csv", |w| out.write_log(w))?;
    csv(&cfg.out_dir, "checkpoint.bin", |w| out.net.write_checkpoint(w))?;
    let theta = out.net.tabulate(grid, f64::INFINITY)?;
    csv(&cfg.out_dir, "psi_theta.csv", |w| {
        writeln!(w, "x,psi_theta,psi_fd")?;
        for (i, x) in grid.nodes().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(x),
                fmt_f64(theta.values()[i]),
                fmt_f64(reference.psi.values()[i])
            )?;
        }
        Ok(())
    })?;
    println!("prefit rel_l2 {:e}", out.prefit_error);
    if let Some(rel) = out.history.last().and_then(|h| h.rel_l2) {
        println!("final rel_l2 vs fd {rel}");
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.evaluate;
    if e.x0.is_empty() {
        return Err(CliError::Usage("empty x0 list".into()));
    }
    let spec = cfg.spec();
    warn_assumptions(&spec)?;
    let lambda = cfg.lambda()?;
    let grid = cfg.grid()?;
    let rule = cfg.rule()?;
    let (policy, reference): (RandomizedPolicy, GridFn) = if e.zero_intensity {
        let psi0 = solve_feynman_kac(&discretize_generator(&spec, &grid), &spec)?;
        (RandomizedPolicy::constant(0.0, &psi0, &spec, lambda.lambda2, &rule)?, psi0)
    } else {
        let sol = solve_randomized(&spec, lambda, &grid, &cfg.outer()?)?;
        (RandomizedPolicy::from_solution(&sol, &spec, lambda, &rule)?, sol.psi)
    };
    let mut rows = Vec::with_capacity(e.x0.len());
    for &x0 in &e.x0 {
        let sim = SimConfig {
            horizon: e.horizon,
            batch: e.paths,
            x0: InitialState::Point(x0),
            ..cfg.sim()
        };
        let ev = run_evaluation(&spec, &policy, lambda, &sim)?;
        let row = EvalRow {
            x0,
            estimate: ev.intensity_weighted,
            fd_value: reference.eval(x0),
        };
        println!(
            "x0 {x0}: {} ± {} (fd {}, inside {})",
            row.estimate.mean,
            1.96 * row.estimate.std_err,
            row.fd_value,
            row.estimate.contains(row.fd_value)
        );
        rows.push(row);
    }
    csv(&cfg.out_dir, "evaluation.csv", |w| write_report(w, &rows))
}

pub fn sweep_lambda(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweep.lambdas.is_empty() {
        return Err(CliError::Usage("empty lambda list".into()));
    }
    let spec = cfg.spec();
    warn_assumptions(&spec)?;
    let lambdas = cfg
        .sweep
        .lambdas
        .iter()
        .map(|&l| LambdaPair::diagonal(l))
        .collect::<Result<Vec<_>, _>>()?;
    let report = lambda_sweep(&spec, &cfg.grid()?, &lambdas, &cfg.outer()?)?;
    csv(&cfg.out_dir, "sweep.csv", |w| report.write_csv(w, &lambdas))?;
    for (lam, e) in lambdas.iter().zip(&report.entries) {
        match e {
            Ok(e) => println!(
                "lambda {}: rel_l2 {:.6} lower bound {}",
                lam.lambda1,
                e.rel_l2_error,
                if e.lower_bound_holds() { "holds" } else { "violated" }
            ),
            Err(err) => println!("lambda {}: {err}", lam.lambda1),
        }
    }
    Ok(())
}

pub fn sweep_sigma(cfg: &RunConfig) -> Result<(), CliError> {
    let sigmas = &cfg.sweep.sigmas;
    if sigmas.is_empty() {
        return Err(CliError::Usage("empty sigma list".into()));
    }
    let lambda = cfg.lambda()?;
    let grid = cfg.grid()?;
    let outer = cfg.outer()?;
    let anchor = cfg.sweep.jump_anchor;
    let mut summary = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut spec = cfg.spec();
        spec.volatility = Coefficient::Constant(sigma);
        spec.sigma_floor = spec.sigma_floor.min(sigma);
        warn_assumptions(&spec)?;
        let sol = solve_randomized(&spec, lambda, &grid, &outer)?;
        let dir = cfg.out_dir.join(format!("sigma_{sigma}"));
        csv(&dir, "psi.csv", |w| {
            writeln!(w, "x,psi,pi_star")?;
            for (i, x) in grid.nodes().enumerate() {
                writeln!(
                    w,
                    "{},{},{}",
                    fmt_f64(x),
                    fmt_f64(sol.psi.values()[i]),
                    fmt_f64(sol.pi_star.values()[i])
                )?;
            }
            Ok(())
        })?;
        let gibbs = JumpGibbs::new(&sol.psi, &spec, anchor, lambda.lambda2, &outer.rule)?;
        csv(&dir, "jump_density.csv", |w| {
            writeln!(w, "xi,density")?;
            // density against the N(−x, 1) prior, times the prior
            for k in 0..=800 {
                let xi = -anchor - 4.0 + 0.01 * k as f64;
                let z = xi + anchor;
                let prior = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                writeln!(w, "{},{}", fmt_f64(xi), fmt_f64(gibbs.density(xi) * prior))?;
            }
            Ok(())
        })?;
        let (_, variance) = gibbs.moments(&outer.rule);
        summary.push((
            sigma,
            sol.psi.eval(0.0),
            flat_region_width(&sol.pi_star, SWEEP_WINDOW, FLAT_FRACTION),
            variance,
        ));
    }
    csv(&cfg.out_dir, "sigma_sweep.csv", |w| {
        writeln!(w, "sigma,psi_at_0,flat_width,jump_variance")?;
        for (s, v, width, var) in &summary {
            writeln!(w, "{},{},{},{}", fmt_f64(*s), fmt_f64(*v), fmt_f64(*width), fmt_f64(*var))?;
        }
        Ok(())
    })?;
    for (s, v, width, var) in &summary {
        println!("sigma {s}: psi(0) {v:.6} flat width {width:.4} jump variance {var:.6}");
    }
    Ok(())
}
