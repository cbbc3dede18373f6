use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::source::{orthonormal_rows, SourceDistribution};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::style::{mean_style, FeatureExtractor, StyleVector};

/// Candidate draws per domain before generation gives up.
pub const MAX_DOMAIN_ATTEMPTS: usize = 10;

/// One synthetic target domain: `x ↦ A x + b + ξ`, `ξ ~ N(0, diag(v))`,
/// applied at `severity` s as `(I + s(A − I)) x + s b` with noise variance
/// `s v`. `A` is symmetric positive definite, so every severity gives an
/// invertible map and severity 0 is the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub matrix: Matrix,
    pub offset: Vec<f64>,
    pub noise_var: Vec<f64>,
    #[serde(default)]
    pub scramble_prob: f64,
    pub severity: f64,
}

impl DomainSpec {
    /// The untouched source domain, id 0.
    pub fn source(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        Self {
            id: 0,
            matrix: m,
            offset: vec![0.0; dim],
            noise_var: vec![0.0; dim],
            scramble_prob: 0.0,
            severity: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn transform(&self) -> Transform {
        let s = self.severity;
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                m.set(i, j, eye + s * (self.matrix.get(i, j) - eye));
            }
        }
        Transform {
            matrix: m,
            offset: self.offset.iter().map(|b| s * b).collect(),
            noise_var: self.noise_var.iter().map(|v| s * v).collect(),
            scramble_prob: s * self.scramble_prob,
        }
    }
}

/// Effective scramble-then-affine-plus-noise input map.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub scramble_prob: f64,
}

impl Transform {
    /// `(1 − f)·a + f·b`, parameter by parameter.
    pub fn lerp(a: &Transform, b: &Transform, f: f64) -> Transform {
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| (1.0 - f) * p + f * q).collect()
        };
        let d = a.offset.len();
        Transform {
            matrix: Matrix::from_vec(d, d, mix(a.matrix.as_slice(), b.matrix.as_slice())).expect("square"),
            offset: mix(&a.offset, &b.offset),
            noise_var: mix(&a.noise_var, &b.noise_var),
            scramble_prob: (1.0 - f) * a.scramble_prob + f * b.scramble_prob,
        }
    }

    pub fn apply<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut y = self.matrix.mul_vec(x);
        for ((yi, b), v) in y.iter_mut().zip(&self.offset).zip(&self.noise_var) {
            let z: f64 = StandardNormal.sample(rng);
            *yi += b + v.sqrt() * z;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGenConfig {
    /// A log-contrast shared by all eigenvalues of `A` is drawn uniformly
    /// from `[min_log_contrast, max_log_contrast]`.
    pub min_log_contrast: f64,
    pub max_log_contrast: f64,
    /// Standard deviation of the per-eigenvalue log-scales of the channel map.
    pub log_scale_std: f64,
    /// Euclidean norm of the offset `b` over the whole input.
    pub offset_norm: f64,
    /// Per-channel noise variances are drawn from `U(0, max_noise_var)`.
    pub max_noise_var: f64,
    /// Per-domain scramble probabilities are drawn from `U(0, max_scramble_prob)`.
    pub max_scramble_prob: f64,
    /// Required style-mean separation, as a multiple of `tau`.
    pub separation_factor: f64,
    /// Batches averaged into each domain's style mean.
    pub probe_batches: usize,
}

impl Default for DomainGenConfig {
    fn default() -> Self {
        Self {
            min_log_contrast: -1.5,
            max_log_contrast: 0.5,
            log_scale_std: 0.6,
            offset_norm: 0.0,
            max_noise_var: 0.0,
            max_scramble_prob: 0.5,
            separation_factor: 1.0,
            probe_batches: 16,
        }
    }
}

/// Everything needed to measure where a domain lands in style space.
#[derive(Debug, Clone, Copy)]
pub struct StyleProbe<'a> {
    pub source: &'a SourceDistribution,
    pub extractor: &'a FeatureExtractor,
    pub source_mean: &'a StyleVector,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl StyleProbe<'_> {
    /// Mean style over `batches` batches drawn from the domain.
    pub fn domain_mean(&self, domain: &DomainSpec, batches: usize) -> Result<StyleVector> {
        let t = domain.transform();
        let mut r = rng::seeded(self.seed, domain.id as u64);
        let styles = (0..batches.max(1))
            .map(|_| {
                let batch = sample_batch(self.source, &t, self.batch_size, &mut r).0;
                self.extractor.extract_style(&batch)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_style(&styles)
    }
}

/// `b` source draws pushed through `t`, with their labels.
pub fn sample_batch<R: Rng>(source: &SourceDistribution, t: &Transform, b: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
    let (x, labels) = source.sample(b, rng);
    let mut data = Vec::with_capacity(b * source.input_dim());
    for row in x.iter_rows() {
        if rng.random::<f64>() < t.scramble_prob {
            let junk = source.sample_uninformative(rng);
            data.extend(t.apply(&junk, rng));
        } else {
            data.extend(t.apply(row, rng));
        }
    }
    (Matrix::from_vec(b, source.input_dim(), data).expect("consistent shape"), labels)
}

/// A domain acting identically at every spatial position: a channel-mixing
/// matrix `G = R diag(e^{c + σ z}) Rᵀ`, a per-channel offset and per-channel
/// noise, each repeated across positions.
fn random_domain(id: usize, channels: usize, positions: usize, severity: f64, gen: &DomainGenConfig, seed: u64) -> DomainSpec {
    let mut r = rng::seeded(seed, 0);
    let basis = orthonormal_rows(channels, channels, &mut r);
    let contrast = if gen.max_log_contrast > gen.min_log_contrast {
        r.random_range(gen.min_log_contrast..gen.max_log_contrast)
    } else {
        gen.min_log_contrast
    };
    let eig: Vec<f64> = (0..channels)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            (contrast + gen.log_scale_std * z).exp()
        })
        .collect();
    let dim = channels * positions;
    let mut m = Matrix::zeros(dim, dim);
    for i in 0..channels {
        for j in 0..channels {
            let g: f64 = (0..channels).map(|k| basis[k][i] * eig[k] * basis[k][j]).sum();
            for p in 0..positions {
                m.set(i * positions + p, j * positions + p, g);
            }
        }
    }
    let dir = &orthonormal_rows(1, channels, &mut r)[0];
    let per_position = gen.offset_norm / (positions as f64).sqrt();
    let noise: Vec<f64> = (0..channels).map(|_| r.random_range(0.0..=gen.max_noise_var)).collect();
    let scramble_prob = r.random_range(0.0..=gen.max_scramble_prob);
    let spread = |v: &[f64], scale: f64| -> Vec<f64> {
        v.iter().flat_map(|&x| std::iter::repeat_n(x * scale, positions)).collect()
    };
    DomainSpec {
        id,
        matrix: m,
        offset: spread(dir, per_position),
        noise_var: spread(&noise, 1.0),
        scramble_prob,
        severity,
    }
}

/// `k` domains with ids `1..=k`. At positive severity every domain's style
/// mean must lie farther than `separation_factor · tau` from the source mean
/// and from every earlier domain; a failing candidate is redrawn from a new
/// sub-seed, at most [`MAX_DOMAIN_ATTEMPTS`] times.
pub fn make_domains(
    k: usize,
    severity: f64,
    seed: u64,
    gen: &DomainGenConfig,
    probe: &StyleProbe<'_>,
) -> Result<Vec<DomainSpec>> {
    if k == 0 {
        return Err(Error::Config("at least one domain is required".into()));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside [0, 1]")));
    }
    let (channels, positions) = (probe.source.channels(), probe.source.positions());
    let need = gen.separation_factor * probe.tau;
    let mut domains: Vec<DomainSpec> = Vec::with_capacity(k);
    let mut means: Vec<StyleVector> = Vec::with_capacity(k);
    for id in 1..=k {
        let mut accepted = false;
        for attempt in 0..MAX_DOMAIN_ATTEMPTS {
            let sub = rng::derive(seed, (id * MAX_DOMAIN_ATTEMPTS + attempt) as u64);
            let cand = random_domain(id, channels, positions, severity, gen, sub);
            if severity == 0.0 {
                domains.push(cand);
                accepted = true;
                break;
            }
            let mean = probe.domain_mean(&cand, gen.probe_batches)?;
            let clear = mean.distance(probe.source_mean) > need && means.iter().all(|m| mean.distance(m) > need);
            if clear {
                domains.push(cand);
                means.push(mean);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "domain {id} could not be separated by {need} in style space after {MAX_DOMAIN_ATTEMPTS} attempts"
            )));
        }
    }
    Ok(domains)
}
