use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rtta_core::rng;
use rtta_core::theory::*;

use crate::config::TheoryConfig;
use crate::error::{CliError, CliResult};
use crate::output::write_file;

const SLOPE_TOL: f64 = 0.1;
const R2_MIN: f64 = 0.99;
const CURVE_TOL: f64 = 0.05;
const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    SgdVar,
    EnsembleVar,
    Recursion,
    FisherEquiv,
    Chebyshev,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::SgdVar,
        Check::EnsembleVar,
        Check::Recursion,
        Check::FisherEquiv,
        Check::Chebyshev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::SgdVar => "sgd_var",
            Check::EnsembleVar => "ensemble_var",
            Check::Recursion => "recursion",
            Check::FisherEquiv => "fisher_equiv",
            Check::Chebyshev => "chebyshev",
        }
    }
}

impl FromStr for Check {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown check {s:?}"))
    }
}

/// Expands `all`, drops empty entries and duplicates, keeps the given order.
pub fn parse_checks(items: &[String]) -> CliResult<Vec<Check>> {
    let mut out = Vec::new();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let add: Vec<Check> = if item == "all" {
            Check::ALL.to_vec()
        } else {
            vec![item.parse().map_err(CliError::Config)?]
        };
        for c in add {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

pub struct CheckOutcome {
    pub check: Check,
    pub pass: bool,
    pub summary: String,
    pub csv: String,
}

/// Validates every selected check before running any of them.
pub fn run_checks(cfg: &TheoryConfig, checks: &[Check], out_dir: &Path) -> CliResult<Vec<CheckOutcome>> {
    cfg.validate(checks)?;
    if checks.is_empty() {
        return Ok(Vec::new());
    }
    let mut outcomes = Vec::new();
    for &c in checks {
        let o = match c {
            Check::SgdVar => sgd_var(cfg)?,
            Check::EnsembleVar => ensemble_var(cfg)?,
            Check::Recursion => recursion(cfg)?,
            Check::FisherEquiv => fisher_equiv(cfg)?,
            Check::Chebyshev => chebyshev(cfg)?,
        };
        write_file(&out_dir.join(format!("theory_{}.csv", c.name())), o.csv.as_bytes())?;
        outcomes.push(o);
    }
    Ok(outcomes)
}

fn sgd_var(cfg: &TheoryConfig) -> CliResult<CheckOutcome> {
    let task = NoisyQuadraticTask::pure_noise(1, cfg.noise_std);
    let v = task.noise_variance();
    let curve = simulate_sgd(&task, cfg.lr, cfg.steps, cfg.trials, cfg.seed)?;
    let fit = fit_linear(&curve);
    let expected = cfg.lr * cfg.lr * v;
    let rel = if expected > 0.0 {
        (fit.slope - expected).abs() / expected
    } else {
        fit.slope.abs()
    };
    let mut csv = String::from("t,empirical_var,closed_form_var,bound,empirical_rate\n");
    for (t, e) in curve.variance.iter().enumerate() {
        writeln!(csv, "{t},{e},{},,", expected * t as f64).unwrap();
    }
    Ok(CheckOutcome {
        check: Check::SgdVar,
        pass: rel <= SLOPE_TOL && fit.r_squared > R2_MIN,
        summary: format!(
            "slope {:.6} vs required {expected:.6} ± {:.0}% (off {:.2}%), R² {:.5} vs required > {R2_MIN}",
            fit.slope,
            100.0 * SLOPE_TOL,
            100.0 * rel,
            fit.r_squared
        ),
        csv,
    })
}

fn ensemble_var(cfg: &TheoryConfig) -> CliResult<CheckOutcome> {
    let task = NoisyQuadraticTask::pure_noise(1, cfg.noise_std);
    let v = task.noise_variance();
    let n = cfg.ensemble_trials as f64;
    let slack = 1.0 + 3.0 * (2.0 / (n - 1.0)).sqrt();
    let mut csv = String::from("alpha,t,empirical_var,closed_form_var,bound,empirical_rate\n");
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let curve = simulate_weight_ensemble(&task, cfg.lr, alpha, cfg.steps, cfg.ensemble_trials, cfg.seed + i as u64)?;
        let bound = ensemble_variance_bound(cfg.lr, v, alpha);
        let (mut worst, mut over) = (0.0f64, 0usize);
        for (t, &e) in curve.variance.iter().enumerate() {
            let closed = ensemble_variance_closed_form(cfg.lr, v, alpha, t);
            writeln!(csv, "{alpha},{t},{e},{closed},{bound},").unwrap();
            if t == 0 {
                continue;
            }
            if closed > 0.0 {
                worst = worst.max((e - closed).abs() / closed);
            }
            if e > bound * slack {
                over += 1;
            }
        }
        pass &= worst <= CURVE_TOL && over == 0;
        parts.push(format!(
            "α = {alpha}: worst relative gap {:.3}% vs required ≤ {:.0}%, {over} steps above the bound",
            100.0 * worst,
            100.0 * CURVE_TOL
        ));
    }
    Ok(CheckOutcome {
        check: Check::EnsembleVar,
        pass,
        summary: parts.join("; "),
        csv,
    })
}

fn recursion(cfg: &TheoryConfig) -> CliResult<CheckOutcome> {
    let (steps, d) = (cfg.recursion_steps, cfg.recursion_dim);
    let mut r = rng::seeded(cfg.seed, 0);
    let draws: Vec<f64> = (0..(steps + 1) * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let theta0 = draws[..d].to_vec();
    let grads: Vec<Vec<f64>> = draws[d..].chunks(d).map(<[f64]>::to_vec).collect();
    let gap = check_recursion(&grads, cfg.lr, cfg.recursion_alpha, &theta0)?;
    Ok(CheckOutcome {
        check: Check::Recursion,
        pass: gap < EXACT_TOL,
        summary: format!("discrepancy {gap:.3e} vs required < {EXACT_TOL:e} over {steps} steps, d = {d}"),
        csv: format!("steps,dim,lr,alpha,discrepancy,tolerance\n{steps},{d},{},{},{gap},{EXACT_TOL}\n", cfg.lr, cfg.recursion_alpha),
    })
}

fn fisher_equiv(cfg: &TheoryConfig) -> CliResult<CheckOutcome> {
    let task = NoisyQuadraticTask {
        optimum: vec![1.0, -0.5, 0.25, 0.0],
        curvature: vec![1.0, 0.5, 2.0, 0.1],
        noise_std: vec![cfg.noise_std; 4],
    };
    let theta0 = vec![0.0; 4];
    let mut csv = String::from("lambda,omega,lr,alpha,discrepancy,rescaled_discrepancy,tolerance\n");
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, &[l, o, e]) in cfg.fisher_triples.iter().enumerate() {
        let r = check_fisher_trajectory(&task, l, o, e, cfg.fisher_steps, &theta0, cfg.seed + i as u64)?;
        writeln!(csv, "{l},{o},{e},{},{},{},{EXACT_TOL}", r.alpha, r.discrepancy, r.rescaled_discrepancy).unwrap();
        pass &= r.discrepancy < EXACT_TOL;
        parts.push(format!(
            "(λ, ω, η) = ({l}, {o}, {e}): discrepancy {:.3e} vs required < {EXACT_TOL:e} (inner step η/α: {:.1e})",
            r.discrepancy, r.rescaled_discrepancy
        ));
    }
    Ok(CheckOutcome {
        check: Check::FisherEquiv,
        pass,
        summary: parts.join("; "),
        csv,
    })
}

fn chebyshev(cfg: &TheoryConfig) -> CliResult<CheckOutcome> {
    let d = cfg.chebyshev_theta0.len();
    let task = NoisyQuadraticTask {
        optimum: vec![0.0; d],
        curvature: vec![1.0; d],
        noise_std: vec![cfg.noise_std; d],
    };
    let spec = StabilitySpec {
        beta: cfg.chebyshev_beta,
        theta0: cfg.chebyshev_theta0.clone(),
    };
    let rep = check_chebyshev(&task, &spec, cfg.lr, cfg.chebyshev_steps, cfg.trials, cfg.seed)?;
    let mut csv = String::from("t,empirical_var,closed_form_var,bound,empirical_rate\n");
    for p in &rep.points {
        writeln!(csv, "{},{},,{},{}", p.t, p.variance, p.bound, p.empirical_rate).unwrap();
    }
    let violations = rep.points.iter().filter(|p| !p.holds()).count();
    let worst = rep
        .points
        .iter()
        .map(|p| p.empirical_rate - p.bound - p.slack)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckOutcome {
        check: Check::Chebyshev,
        pass: rep.holds(),
        summary: format!(
            "{violations} of {} steps exceed bound + 3σ (largest excess {worst:.4}, required ≤ 0)",
            rep.points.len()
        ),
        csv,
    })
}
