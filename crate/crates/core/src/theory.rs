//! Monte-Carlo and exact checks of the parameter-variance analysis of TTA:
//! linear variance growth under plain SGD, bounded variance under source
//! weight ensembling, the closed-form ensembling recursion, the
//! Fisher/ensembling correspondence and the Chebyshev divergence bound.
//!
//! Trials are independent ChaCha streams indexed by trial number, so the
//! rayon fan-out reproduces a sequential run bit for bit.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{distance, sq_distance};
use crate::rng;

/// `∇L(θ) = curvature ⊙ (θ − θ*) + noise_std ⊙ ξ`, `ξ ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyQuadraticTask {
    pub optimum: Vec<f64>,
    pub curvature: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl NoisyQuadraticTask {
    /// Zero curvature: the iterates perform a pure noise walk.
    pub fn pure_noise(dim: usize, noise_std: f64) -> Self {
        Self {
            optimum: vec![0.0; dim],
            curvature: vec![0.0; dim],
            noise_std: vec![noise_std; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    /// Total gradient-noise variance `E‖ξ‖²`.
    pub fn noise_variance(&self) -> f64 {
        self.noise_std.iter().map(|s| s * s).sum()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.curvature.len() != d || self.noise_std.len() != d {
            return Err(Error::Config("task vectors must share a positive dimension".into()));
        }
        if self.curvature.iter().any(|&c| !(c >= 0.0)) || self.noise_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("curvature and noise must be nonnegative".into()));
        }
        Ok(())
    }

    fn gradient_into<R: rand::Rng>(&self, theta: &[f64], rng: &mut R, out: &mut [f64]) {
        for i in 0..theta.len() {
            let xi: f64 = StandardNormal.sample(rng);
            out[i] = self.curvature[i] * (theta[i] - self.optimum[i]) + self.noise_std[i] * xi;
        }
    }
}

/// Trace of the empirical parameter covariance per step; index 0 is `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub variance: Vec<f64>,
    pub trials: usize,
}

impl VarianceCurve {
    pub fn steps(&self) -> usize {
        self.variance.len().saturating_sub(1)
    }
}

/// Per-step running sums across trials, merged after the parallel fan-out.
#[derive(Clone)]
struct Moments {
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
}

impl Moments {
    fn new(steps: usize, dim: usize) -> Self {
        Self {
            sum: vec![vec![0.0; dim]; steps + 1],
            sum_sq: vec![vec![0.0; dim]; steps + 1],
        }
    }

    fn record(&mut self, t: usize, theta: &[f64]) {
        for (i, &v) in theta.iter().enumerate() {
            self.sum[t][i] += v;
            self.sum_sq[t][i] += v * v;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.sum_sq.iter_mut().zip(other.sum_sq) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self
    }

    /// Unbiased per-coordinate variances summed over coordinates.
    fn trace_variance(&self, n: usize) -> Vec<f64> {
        let n = n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, sq)| {
                s.iter()
                    .zip(sq)
                    .map(|(&a, &b)| ((b - a * a / n) / (n - 1.0)).max(0.0))
                    .sum()
            })
            .collect()
    }
}

/// Chunked parallel Monte Carlo. Chunking is fixed, so the merge order (and
/// hence every floating-point sum) does not depend on the thread count.
fn monte_carlo<F>(steps: usize, dim: usize, trials: usize, seed: u64, trajectory: F) -> Moments
where
    F: Fn(&mut rng::SimRng, &mut Moments) + Sync,
{
    const CHUNK: usize = 256;
    let chunks = trials.div_ceil(CHUNK);
    let partials: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(steps, dim);
            for trial in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut r = rng::seeded(seed, trial as u64);
                trajectory(&mut r, &mut m);
            }
            m
        })
        .collect();
    partials
        .into_iter()
        .reduce(Moments::merge)
        .unwrap_or_else(|| Moments::new(steps, dim))
}

/// Fewest trials a Monte-Carlo check accepts.
pub const MIN_TRIALS: usize = 100;

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    Ok(())
}

/// Plain SGD from `θ*`; returns the per-step trace variance.
pub fn simulate_sgd(task: &NoisyQuadraticTask, lr: f64, steps: usize, trials: usize, seed: u64) -> Result<VarianceCurve> {
    task.validate()?;
    check_trials(trials)?;
    let d = task.dim();
    let m = monte_carlo(steps, d, trials, seed, |r, m| {
        let mut theta = task.optimum.clone();
        let mut g = vec![0.0; d];
        m.record(0, &theta);
        for t in 1..=steps {
            task.gradient_into(&theta, r, &mut g);
            theta.iter_mut().zip(&g).for_each(|(x, gi)| *x -= lr * gi);
            m.record(t, &theta);
        }
    });
    Ok(VarianceCurve {
        variance: m.trace_variance(trials),
        trials,
    })
}

/// SGD followed by interpolation `θ ← αθ̂ + (1−α)θ₀` each step.
pub fn simulate_weight_ensemble(
    task: &NoisyQuadraticTask,
    lr: f64,
    alpha: f64,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<VarianceCurve> {
    task.validate()?;
    check_trials(trials)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")));
    }
    let d = task.dim();
    let theta0 = task.optimum.clone();
    let m = monte_carlo(steps, d, trials, seed, |r, m| {
        let mut theta = theta0.clone();
        let mut g = vec![0.0; d];
        m.record(0, &theta);
        for t in 1..=steps {
            task.gradient_into(&theta, r, &mut g);
            for i in 0..d {
                let hat = theta[i] - lr * g[i];
                theta[i] = alpha * hat + (1.0 - alpha) * theta0[i];
            }
            m.record(t, &theta);
        }
    });
    Ok(VarianceCurve {
        variance: m.trace_variance(trials),
        trials,
    })
}

/// `η² V̄ · α²(1 − α^{2t}) / (1 − α²)`; the `α = 1` limit is `η² V̄ t`.
pub fn ensemble_variance_closed_form(lr: f64, noise_var: f64, alpha: f64, t: usize) -> f64 {
    let a2 = alpha * alpha;
    if (1.0 - a2).abs() < f64::EPSILON {
        return lr * lr * noise_var * t as f64;
    }
    lr * lr * noise_var * a2 * (1.0 - a2.powi(t as i32)) / (1.0 - a2)
}

/// `η² V̄ · α² / (1 − α²)`, the `t → ∞` limit for `α < 1`.
pub fn ensemble_variance_bound(lr: f64, noise_var: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    lr * lr * noise_var * a2 / (1.0 - a2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `variance[t]` on `t` over `t = 1..=steps`.
pub fn fit_linear(curve: &VarianceCurve) -> LinearFit {
    let pts: Vec<(f64, f64)> = curve
        .variance
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, &v)| (t as f64, v))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let syy: f64 = pts.iter().map(|(_, y)| (y - my) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}

/// Largest gap between iterating the two-stage ensembling update and the
/// closed-form sum `θ_t = θ₀ − η Σ_{i<t} α^{t−i} g_i`, over every `t`.
pub fn check_recursion(gradients: &[Vec<f64>], lr: f64, alpha: f64, theta0: &[f64]) -> Result<f64> {
    if gradients.is_empty() {
        return Err(Error::InsufficientData("empty gradient log".into()));
    }
    let d = theta0.len();
    if gradients.iter().any(|g| g.len() != d) {
        return Err(Error::InputDomain("gradient dimension mismatch".into()));
    }
    let mut theta = theta0.to_vec();
    let mut worst: f64 = 0.0;
    for t in 1..=gradients.len() {
        let g = &gradients[t - 1];
        for i in 0..d {
            let hat = theta[i] - lr * g[i];
            theta[i] = alpha * hat + (1.0 - alpha) * theta0[i];
        }
        let mut closed = theta0.to_vec();
        for (i, gi) in gradients[..t].iter().enumerate() {
            let w = lr * alpha.powi((t - i) as i32);
            closed.iter_mut().zip(gi).for_each(|(c, g)| *c -= w * g);
        }
        let gap = theta
            .iter()
            .zip(&closed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherTrajectoryReport {
    /// `α = 1 − 2λωη`
    pub alpha: f64,
    /// Fisher trajectory against the two-stage ensembling update at step `η`.
    pub discrepancy: f64,
    /// Fisher trajectory against ensembling with inner step `η / α`.
    pub rescaled_discrepancy: f64,
}

/// Runs the Fisher-regularized SGD trajectory and ensembling trajectories on
/// shared gradient noise and reports their largest per-step gaps.
pub fn check_fisher_trajectory(
    task: &NoisyQuadraticTask,
    lambda: f64,
    omega: f64,
    lr: f64,
    steps: usize,
    theta0: &[f64],
    seed: u64,
) -> Result<FisherTrajectoryReport> {
    task.validate()?;
    let alpha = 1.0 - 2.0 * lambda * omega * lr;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "1 - 2·λ·ω·η = {alpha} lies outside (0, 1] (λ = {lambda}, ω = {omega}, η = {lr})"
        )));
    }
    if theta0.len() != task.dim() {
        return Err(Error::InputDomain("theta0 dimension mismatch".into()));
    }
    let d = task.dim();
    let mut fisher = theta0.to_vec();
    let mut ens = theta0.to_vec();
    let mut rescaled = theta0.to_vec();
    let mut noise_rng = rng::seeded(seed, 0);
    let (mut worst, mut worst_rescaled) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        let xi: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
        let grad = |theta: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| task.curvature[i] * (theta[i] - task.optimum[i]) + task.noise_std[i] * xi[i])
                .collect()
        };
        let gf = grad(&fisher);
        let ge = grad(&ens);
        let gr = grad(&rescaled);
        for i in 0..d {
            fisher[i] -= lr * (gf[i] + 2.0 * lambda * omega * (fisher[i] - theta0[i]));
            ens[i] = alpha * (ens[i] - lr * ge[i]) + (1.0 - alpha) * theta0[i];
            rescaled[i] = alpha * (rescaled[i] - lr / alpha * gr[i]) + (1.0 - alpha) * theta0[i];
        }
        let gap = |a: &[f64]| a.iter().zip(&fisher).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(gap(&ens));
        worst_rescaled = worst_rescaled.max(gap(&rescaled));
    }
    Ok(FisherTrajectoryReport {
        alpha,
        discrepancy: worst,
        rescaled_discrepancy: worst_rescaled,
    })
}

/// Ball of radius `beta` around the optimum, entered from `theta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySpec {
    pub beta: f64,
    pub theta0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevPoint {
    pub t: usize,
    pub variance: f64,
    pub bound: f64,
    pub empirical_rate: f64,
    /// Three binomial standard errors at the bound.
    pub slack: f64,
}

impl ChebyshevPoint {
    pub fn holds(&self) -> bool {
        self.empirical_rate <= self.bound + self.slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevReport {
    pub points: Vec<ChebyshevPoint>,
}

impl ChebyshevReport {
    pub fn holds(&self) -> bool {
        self.points.iter().all(ChebyshevPoint::holds)
    }
}

/// Empirical `Pr[‖θ_t − θ*‖ > β]` against `Var[θ_t] / (β − ‖θ₀ − θ*‖)²`.
pub fn check_chebyshev(
    task: &NoisyQuadraticTask,
    spec: &StabilitySpec,
    lr: f64,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<ChebyshevReport> {
    task.validate()?;
    check_trials(trials)?;
    let d = task.dim();
    if spec.theta0.len() != d {
        return Err(Error::InputDomain("theta0 dimension mismatch".into()));
    }
    let start_gap = distance(&spec.theta0, &task.optimum);
    if !(spec.beta > start_gap) {
        return Err(Error::Config(format!(
            "stability radius {} must exceed the initial distance {start_gap}",
            spec.beta
        )));
    }
    // ‖E θ_t − θ*‖ shrinks iff every coordinate's mean contracts.
    let moves = spec.theta0.iter().zip(&task.optimum).any(|(a, b)| a != b);
    for (i, &c) in task.curvature.iter().enumerate() {
        let factor = (1.0 - lr * c).abs();
        if moves && spec.theta0[i] != task.optimum[i] && !(factor < 1.0) {
            return Err(Error::Config(format!(
                "coordinate {i} is not contractive (|1 − η·c| = {factor}); the drift condition fails"
            )));
        }
    }

    let beta_sq = spec.beta * spec.beta;
    let per_chunk: Vec<(Moments, Vec<u64>)> = {
        const CHUNK: usize = 256;
        (0..trials.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut m = Moments::new(steps, d);
                let mut outside = vec![0u64; steps + 1];
                for trial in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                    let mut r = rng::seeded(seed, trial as u64);
                    let mut theta = spec.theta0.clone();
                    let mut g = vec![0.0; d];
                    m.record(0, &theta);
                    for t in 1..=steps {
                        task.gradient_into(&theta, &mut r, &mut g);
                        theta.iter_mut().zip(&g).for_each(|(x, gi)| *x -= lr * gi);
                        m.record(t, &theta);
                        if sq_distance(&theta, &task.optimum) > beta_sq {
                            outside[t] += 1;
                        }
                    }
                }
                (m, outside)
            })
            .collect()
    };
    let mut moments = Moments::new(steps, d);
    let mut outside = vec![0u64; steps + 1];
    for (m, o) in per_chunk {
        moments = moments.merge(m);
        outside.iter_mut().zip(o).for_each(|(a, b)| *a += b);
    }
    let variance = moments.trace_variance(trials);
    let denom = (spec.beta - start_gap).powi(2);
    let n = trials as f64;
    let points = (1..=steps)
        .map(|t| {
            let bound = variance[t] / denom;
            let p = bound.min(1.0);
            ChebyshevPoint {
                t,
                variance: variance[t],
                bound,
                empirical_rate: outside[t] as f64 / n,
                slack: 3.0 * (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect();
    Ok(ChebyshevReport { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn noiseless_or_frozen_walks_have_no_variance() {
        let task = NoisyQuadraticTask::pure_noise(3, 0.0);
        let c = simulate_sgd(&task, 0.1, 20, 100, 1).unwrap();
        assert!(c.variance.iter().all(|&v| v == 0.0));
        let task = NoisyQuadraticTask::pure_noise(3, 1.0);
        let c = simulate_sgd(&task, 0.0, 20, 100, 1).unwrap();
        assert!(c.variance.iter().all(|&v| v == 0.0));
        let c = simulate_weight_ensemble(&task, 0.1, 0.0, 20, 100, 1).unwrap();
        assert!(c.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parallel_run_is_reproducible() {
        let task = NoisyQuadraticTask::pure_noise(2, 1.0);
        let a = simulate_sgd(&task, 0.1, 30, 1000, 42).unwrap();
        let b = simulate_sgd(&task, 0.1, 30, 1000, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_variance_slope_is_eta_squared_v() {
        let task = NoisyQuadraticTask::pure_noise(1, 1.0);
        let c = simulate_sgd(&task, 0.1, 100, 10_000, 7).unwrap();
        let fit = fit_linear(&c);
        assert!((fit.slope - 0.01).abs() <= 0.001, "{fit:?}");
        assert!(fit.r_squared > 0.99);
    }

    #[test]
    fn closed_form_limits() {
        let near_one = 1.0 - 1e-9;
        for t in 1..=100 {
            let v = ensemble_variance_closed_form(0.1, 1.0, near_one, t);
            let lin = 0.01 * t as f64;
            assert!((v - lin).abs() <= 1e-3 * lin);
        }
        assert_eq!(ensemble_variance_closed_form(0.1, 1.0, 0.0, 10), 0.0);
        assert!(ensemble_variance_closed_form(0.1, 1.0, 0.9, 1000) <= ensemble_variance_bound(0.1, 1.0, 0.9));
    }

    #[test]
    fn ensemble_curve_tracks_closed_form() {
        let task = NoisyQuadraticTask::pure_noise(1, 1.0);
        let c = simulate_weight_ensemble(&task, 0.1, 0.9, 50, 20_000, 3).unwrap();
        let want = ensemble_variance_closed_form(0.1, 1.0, 0.9, 50);
        let oracle = 0.81 * (1.0 - 0.9f64.powi(100)) / (1.0 - 0.81) * 0.01;
        assert!((want - oracle).abs() < 1e-15);
        assert!((c.variance[50] - want).abs() <= 0.05 * want);
    }

    #[test]
    fn recursion_cases() {
        let zeros = vec![vec![0.0; 4]; 10];
        assert_eq!(check_recursion(&zeros, 0.1, 0.9, &[1.0; 4]).unwrap(), 0.0);
        assert!(check_recursion(&[vec![2.0]], 0.1, 0.9, &[1.0]).unwrap() < 1e-15);
        assert!(check_recursion(&[], 0.1, 0.9, &[1.0]).is_err());

        let mut r = rng::seeded(5, 0);
        let log: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        assert!(check_recursion(&log, 0.05, 0.95, &[0.5; 8]).unwrap() < 1e-10);
    }

    #[test]
    fn fisher_trajectory_cases() {
        let task = NoisyQuadraticTask {
            optimum: vec![1.0; 4],
            curvature: vec![0.5; 4],
            noise_std: vec![1.0; 4],
        };
        let r = check_fisher_trajectory(&task, 0.0, 1.0, 0.1, 100, &[0.0; 4], 1).unwrap();
        assert_eq!((r.alpha, r.discrepancy, r.rescaled_discrepancy), (1.0, 0.0, 0.0));

        let r = check_fisher_trajectory(&task, 0.5, 1.0, 0.1, 100, &[0.0; 4], 1).unwrap();
        assert!((r.alpha - 0.9).abs() < 1e-15);
        assert!(r.rescaled_discrepancy < 1e-10);
        assert!(r.discrepancy > 1e-3);

        let still = NoisyQuadraticTask {
            noise_std: vec![0.0; 4],
            ..task.clone()
        };
        let r = check_fisher_trajectory(&still, 0.5, 1.0, 0.1, 100, &[1.0; 4], 1).unwrap();
        assert_eq!(r.discrepancy, 0.0);

        assert!(matches!(
            check_fisher_trajectory(&task, -1.0, 1.0, 0.1, 10, &[0.0; 4], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn chebyshev_cases() {
        let spec = StabilitySpec {
            beta: 5.0,
            theta0: vec![1.0],
        };
        let quiet = NoisyQuadraticTask {
            optimum: vec![0.0],
            curvature: vec![1.0],
            noise_std: vec![0.0],
        };
        let rep = check_chebyshev(&quiet, &spec, 0.1, 50, 200, 1).unwrap();
        assert!(rep.points.iter().all(|p| p.empirical_rate == 0.0) && rep.holds());

        let noisy = NoisyQuadraticTask {
            noise_std: vec![1.0],
            ..quiet.clone()
        };
        let huge = StabilitySpec {
            beta: 1e6,
            theta0: vec![1.0],
        };
        let rep = check_chebyshev(&noisy, &huge, 0.1, 50, 500, 2).unwrap();
        assert!(rep.holds() && rep.points.iter().all(|p| p.bound < 1e-9));

        let bad = StabilitySpec {
            beta: 0.5,
            theta0: vec![1.0],
        };
        assert!(matches!(check_chebyshev(&noisy, &bad, 0.1, 5, 10, 1), Err(Error::Config(_))));
        let flat = NoisyQuadraticTask {
            curvature: vec![0.0],
            ..noisy
        };
        assert!(matches!(check_chebyshev(&flat, &spec, 0.1, 5, 10, 1), Err(Error::Config(_))));
    }
}
