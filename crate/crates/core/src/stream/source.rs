use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub classes: usize,
    pub input_dim: usize,
    /// Inputs are `input_dim / positions` channels laid out channel-major
    /// over `positions` spatial positions.
    pub positions: usize,
    /// Distance between any two class means, in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 32,
            positions: 8,
            separation: 6.0,
            noise_std: 0.1,
        }
    }
}

/// Isotropic Gaussian blobs around mutually orthogonal class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDistribution {
    config: SourceConfig,
    /// `classes × input_dim`
    means: Matrix,
    /// Per-coordinate variance of the label-marginal distribution.
    marginal_std: Vec<f64>,
}

impl SourceDistribution {
    pub fn new(config: &SourceConfig, seed: u64) -> Result<Self> {
        let SourceConfig {
            classes,
            input_dim,
            positions,
            separation,
            noise_std,
        } = *config;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if classes > input_dim {
            return Err(Error::Config(format!(
                "{classes} orthogonal class means do not fit in dimension {input_dim}"
            )));
        }
        if positions == 0 || input_dim % positions != 0 {
            return Err(Error::Config(format!(
                "input_dim {input_dim} is not a multiple of positions {positions}"
            )));
        }
        if !(separation >= 0.0 && noise_std > 0.0) {
            return Err(Error::Config("separation must be nonnegative and noise_std positive".into()));
        }
        let mut r = rng::seeded(seed, 0);
        let basis = orthonormal_rows(classes, input_dim, &mut r);
        let radius = separation * noise_std / std::f64::consts::SQRT_2;
        let data = basis.into_iter().flatten().map(|v| v * radius).collect();
        let means = Matrix::from_vec(classes, input_dim, data)?;
        let marginal_std = (0..input_dim)
            .map(|i| {
                let col: Vec<f64> = (0..classes).map(|k| means.get(k, i)).collect();
                let m = col.iter().sum::<f64>() / classes as f64;
                let between = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / classes as f64;
                (noise_std * noise_std + between).sqrt()
            })
            .collect();
        Ok(Self {
            config: *config,
            means,
            marginal_std,
        })
    }

    pub fn config(&self) -> &SourceConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn positions(&self) -> usize {
        self.config.positions
    }

    pub fn channels(&self) -> usize {
        self.config.input_dim / self.config.positions
    }

    pub fn class_mean(&self, y: usize) -> &[f64] {
        self.means.row(y)
    }

    pub fn sample_class<R: Rng>(&self, y: usize, rng: &mut R) -> Vec<f64> {
        self.means
            .row(y)
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.config.noise_std * z
            })
            .collect()
    }

    /// A label-free draw from `N(0, diag(σ²))` with `σ²` the per-coordinate
    /// variance of [`sample`](Self::sample); it carries no class signal.
    pub fn sample_uninformative<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.marginal_std
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect()
    }

    /// `n` samples with uniformly drawn labels.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.input_dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..self.classes());
            data.extend(self.sample_class(y, rng));
            labels.push(y);
        }
        (Matrix::from_vec(n, self.input_dim(), data).expect("consistent shape"), labels)
    }

    /// Class-balanced labelled set, classes interleaved.
    pub fn dataset(&self, samples_per_class: usize, seed: u64) -> Result<LabeledData> {
        if samples_per_class == 0 {
            return Err(Error::InsufficientData("samples_per_class must be positive".into()));
        }
        let mut r = rng::seeded(seed, 0);
        let n = samples_per_class * self.classes();
        let mut data = Vec::with_capacity(n * self.input_dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..samples_per_class {
            for y in 0..self.classes() {
                data.extend(self.sample_class(y, &mut r));
                labels.push(y);
            }
        }
        LabeledData::new(Matrix::from_vec(n, self.input_dim(), data)?, labels, self.classes())
    }
}

/// Source distribution and a balanced sample from it, both fixed by `seed`.
pub fn make_source_dataset(config: &SourceConfig, samples_per_class: usize, seed: u64) -> Result<LabeledData> {
    SourceDistribution::new(config, seed)?.dataset(samples_per_class, rng::derive(seed, 1))
}

/// `n` orthonormal rows in dimension `dim` (Gram-Schmidt on Gaussian draws).
pub(crate) fn orthonormal_rows<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &rows {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}
