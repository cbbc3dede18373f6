//! Desk-scale adaptable classifier and the test-time objectives that update it.
//!
//! The classifier is `softmax(W (γ ⊙ φ(x) + β) + b)` with a frozen random
//! feature map `φ` and a frozen head `(W, b)`; only the per-feature affine
//! `(γ, β)` is adapted at test time. All gradients are closed form.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::info;
use crate::matrix::Matrix;
use crate::model_reservoir::ParamVector;
use crate::rng;
use crate::style::Activation;

const TRAIN_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub seed: u64,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            seed: 0xC1A55,
            hidden_dim: 16,
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptableClassifier {
    /// `h × input_dim`
    feature_weights: Matrix,
    activation: Activation,
    /// `|Y| × h`
    head: Matrix,
    bias: Vec<f64>,
}

impl AdaptableClassifier {
    /// Random frozen feature map and a small random head; returns the model
    /// and the identity affine `(γ = 1, β = 0)`.
    pub fn init(spec: &ClassifierSpec, input_dim: usize, classes: usize) -> Result<(Self, ParamVector)> {
        if spec.hidden_dim == 0 || input_dim == 0 || classes < 2 {
            return Err(Error::Config(
                "classifier needs positive widths and at least 2 classes".into(),
            ));
        }
        let h = spec.hidden_dim;
        let mut r = rng::seeded(spec.seed, 0);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z * scale
                })
                .collect()
        };
        let feature_weights = Matrix::from_vec(h, input_dim, gauss(h * input_dim, 1.0 / (input_dim as f64).sqrt()))?;
        let head = Matrix::from_vec(classes, h, gauss(classes * h, 0.1 / (h as f64).sqrt()))?;
        let model = Self {
            feature_weights,
            activation: spec.activation,
            head,
            bias: vec![0.0; classes],
        };
        let mut theta = vec![1.0; h];
        theta.extend(std::iter::repeat_n(0.0, h));
        Ok((model, ParamVector::new(theta)?))
    }

    pub fn hidden_dim(&self) -> usize {
        self.feature_weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_weights.cols()
    }

    pub fn classes(&self) -> usize {
        self.head.rows()
    }

    pub fn param_dim(&self) -> usize {
        2 * self.hidden_dim()
    }

    pub fn head(&self) -> (&Matrix, &[f64]) {
        (&self.head, &self.bias)
    }

    /// Frozen features `φ(x)` for every row.
    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::InputDomain(format!(
                "batch width {} does not match model input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let h = self.hidden_dim();
        let mut out = Matrix::zeros(batch.rows(), h);
        for (i, x) in batch.iter_rows().enumerate() {
            let z = self.feature_weights.mul_vec(x);
            for (o, v) in out.row_mut(i).iter_mut().zip(z) {
                *o = self.activation.apply(v);
            }
        }
        Ok(out)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_dim() {
            return Err(Error::InputDomain(format!(
                "expected {} trainable parameters, got {}",
                self.param_dim(),
                params.dim()
            )));
        }
        Ok(())
    }

    /// `γ ⊙ f + β`
    fn affine(&self, params: &ParamVector, f: &[f64]) -> Vec<f64> {
        let h = self.hidden_dim();
        let (gamma, beta) = params.as_slice().split_at(h);
        f.iter()
            .zip(gamma)
            .zip(beta)
            .map(|((x, g), b)| g * x + b)
            .collect()
    }

    fn probs_from_features(&self, params: &ParamVector, feats: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(feats.rows(), self.classes());
        for (i, f) in feats.iter_rows().enumerate() {
            let u = self.affine(params, f);
            let mut z = self.head.mul_vec(&u);
            for (zk, bk) in z.iter_mut().zip(&self.bias) {
                *zk += bk;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite logits for sample {i}")));
            }
            info::softmax_in_place(&mut z);
            out.row_mut(i).copy_from_slice(&z);
        }
        Ok(out)
    }

    /// Row-softmax class probabilities, `b × |Y|`.
    pub fn predict(&self, params: &ParamVector, batch: &Matrix) -> Result<Matrix> {
        self.check_params(params)?;
        let feats = self.features(batch)?;
        self.probs_from_features(params, &feats)
    }

    pub fn accuracy(&self, params: &ParamVector, data: &LabeledData) -> Result<f64> {
        let probs = self.predict(params, &data.inputs)?;
        Ok(1.0 - error_rate(&probs, &data.labels))
    }

    /// Backpropagates per-row logit gradients `g_z` into `(∂γ, ∂β)`.
    fn affine_grad(&self, feats: &Matrix, g_logits: &Matrix) -> Vec<f64> {
        let h = self.hidden_dim();
        let mut grad = vec![0.0; 2 * h];
        for (f, gz) in feats.iter_rows().zip(g_logits.iter_rows()) {
            if gz.iter().all(|&v| v == 0.0) {
                continue;
            }
            let gu = self.head.tr_mul_vec(gz);
            for j in 0..h {
                grad[j] += gu[j] * f[j];
                grad[h + j] += gu[j];
            }
        }
        grad
    }
}

/// Fraction of rows whose argmax (ties → lowest) differs from the label.
pub fn error_rate(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| crate::model_reservoir::select_active(row) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Mean Shannon entropy of the rows.
pub fn entropy_loss(probs: &Matrix) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    probs.iter_rows().map(info::entropy).sum::<f64>() / probs.rows() as f64
}

/// Reliable-sample mask: row entropy strictly below `margin`.
pub fn sample_filter(probs: &Matrix, margin: f64) -> Vec<bool> {
    probs.iter_rows().map(|r| info::entropy(r) < margin).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Mean entropy over the batch (TENT-style).
    Entropy,
    /// Entropy over reliable samples only (ETA-style).
    FilteredEntropy,
    /// Entropy plus the source-anchored Fisher penalty.
    FisherEntropy,
    /// Entropy step followed by interpolation toward the source.
    WeightEnsembleEntropy,
    /// Filtering plus Fisher penalty (EATA-style).
    FilteredFisher,
    /// Filtering plus source interpolation (ROID-style, no consistency loss).
    FilteredEnsemble,
}

impl ObjectiveKind {
    pub fn filtered(self) -> bool {
        matches!(
            self,
            Self::FilteredEntropy | Self::FilteredFisher | Self::FilteredEnsemble
        )
    }

    pub fn fisher(self) -> bool {
        matches!(self, Self::FisherEntropy | Self::FilteredFisher)
    }

    pub fn ensemble(self) -> bool {
        matches!(self, Self::WeightEnsembleEntropy | Self::FilteredEnsemble)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub lr: f64,
    /// Entropy margin `E₀`; `None` means `0.4 · ln |Y|`.
    #[serde(default)]
    pub entropy_margin: Option<f64>,
    pub fisher_lambda: f64,
    pub alpha: f64,
}

impl ObjectiveConfig {
    pub const DEFAULT_LR: f64 = 1e-3;

    /// Single-model defaults: λ = 2000, α = 0.99.
    pub fn single(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            lr: Self::DEFAULT_LR,
            entropy_margin: None,
            fisher_lambda: 2000.0,
            alpha: 0.99,
        }
    }

    /// Weaker regularization for per-domain models: λ = 1000, α = 0.995.
    pub fn reservoir(kind: ObjectiveKind) -> Self {
        Self {
            fisher_lambda: 1000.0,
            alpha: 0.995,
            ..Self::single(kind)
        }
    }

    pub fn margin(&self, classes: usize) -> f64 {
        self.entropy_margin
            .unwrap_or_else(|| 0.4 * (classes as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr = {}", self.lr));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            bad.push(format!("alpha = {} (must lie in (0, 1])", self.alpha));
        }
        if !(self.fisher_lambda >= 0.0 && self.fisher_lambda.is_finite()) {
            bad.push(format!("fisher_lambda = {}", self.fisher_lambda));
        }
        if let Some(m) = self.entropy_margin {
            if !(m > 0.0) {
                bad.push(format!("entropy_margin = {m}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join(", ")))
        }
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::single(ObjectiveKind::Entropy)
    }
}

/// Source parameters and diagonal Fisher weights the regularizers pull toward.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceAnchor {
    pub params: ParamVector,
    pub fisher: Vec<f64>,
}

impl SourceAnchor {
    pub fn new(params: ParamVector, fisher: Vec<f64>) -> Result<Self> {
        if fisher.len() != params.dim() {
            return Err(Error::InputDomain(format!(
                "Fisher diagonal has {} entries for {} parameters",
                fisher.len(),
                params.dim()
            )));
        }
        if fisher.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InputDomain("Fisher weights must be finite and nonnegative".into()));
        }
        Ok(Self { params, fisher })
    }

    /// Anchor with zero Fisher weights.
    pub fn plain(params: ParamVector) -> Self {
        let n = params.dim();
        Self {
            params,
            fisher: vec![0.0; n],
        }
    }
}

/// Per-row weights of the entropy term: `1/b`, or `1/|S|` on the reliable set.
fn row_weights(probs: &Matrix, cfg: &ObjectiveConfig) -> Vec<f64> {
    let b = probs.rows();
    if cfg.kind.filtered() {
        let mask = sample_filter(probs, cfg.margin(probs.cols()));
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return vec![0.0; b];
        }
        mask.iter()
            .map(|&m| if m { 1.0 / kept as f64 } else { 0.0 })
            .collect()
    } else {
        vec![1.0 / b as f64; b]
    }
}

fn fisher_penalty(params: &ParamVector, cfg: &ObjectiveConfig, anchor: &SourceAnchor) -> f64 {
    if !cfg.kind.fisher() {
        return 0.0;
    }
    cfg.fisher_lambda
        * params
            .as_slice()
            .iter()
            .zip(anchor.params.as_slice())
            .zip(&anchor.fisher)
            .map(|((t, t0), w)| w * (t - t0) * (t - t0))
            .sum::<f64>()
}

/// Value of the configured objective (the ensemble interpolation is a
/// post-step operation and does not enter the loss).
pub fn objective_loss(
    model: &AdaptableClassifier,
    params: &ParamVector,
    batch: &Matrix,
    cfg: &ObjectiveConfig,
    anchor: &SourceAnchor,
) -> Result<f64> {
    let probs = model.predict(params, batch)?;
    let w = row_weights(&probs, cfg);
    let ent: f64 = probs
        .iter_rows()
        .zip(&w)
        .map(|(r, wi)| wi * info::entropy(r))
        .sum();
    Ok(ent + fisher_penalty(params, cfg, anchor))
}

/// Loss and closed-form gradient with respect to `(γ, β)`.
pub fn objective_gradient(
    model: &AdaptableClassifier,
    params: &ParamVector,
    batch: &Matrix,
    cfg: &ObjectiveConfig,
    anchor: &SourceAnchor,
) -> Result<(f64, Vec<f64>)> {
    model.check_params(params)?;
    let feats = model.features(batch)?;
    let probs = model.probs_from_features(params, &feats)?;
    let w = row_weights(&probs, cfg);

    let mut loss = 0.0;
    let mut g_logits = Matrix::zeros(probs.rows(), probs.cols());
    for (i, p) in probs.iter_rows().enumerate() {
        if w[i] == 0.0 {
            continue;
        }
        let h = info::entropy(p);
        loss += w[i] * h;
        // ∂H/∂z_k = −p_k (ln p_k + H)
        for (g, &pk) in g_logits.row_mut(i).iter_mut().zip(p) {
            *g = if pk > 0.0 { -w[i] * pk * (pk.ln() + h) } else { 0.0 };
        }
    }
    let mut grad = model.affine_grad(&feats, &g_logits);
    if cfg.kind.fisher() {
        for ((g, (t, t0)), om) in grad
            .iter_mut()
            .zip(params.as_slice().iter().zip(anchor.params.as_slice()))
            .zip(&anchor.fisher)
        {
            *g += 2.0 * cfg.fisher_lambda * om * (t - t0);
        }
        loss += fisher_penalty(params, cfg, anchor);
    }
    Ok((loss, grad))
}

/// One SGD step on the configured objective. Filtered objectives with no
/// reliable sample leave the parameters unchanged.
pub fn tta_step(
    model: &AdaptableClassifier,
    params: &ParamVector,
    batch: &Matrix,
    cfg: &ObjectiveConfig,
    anchor: &SourceAnchor,
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("alpha = {} outside [0, 1]", cfg.alpha)));
    }
    if cfg.kind.filtered() {
        let probs = model.predict(params, batch)?;
        if !sample_filter(&probs, cfg.margin(model.classes()))
            .iter()
            .any(|&m| m)
        {
            return Ok(params.clone());
        }
    }
    let (_, grad) = objective_gradient(model, params, batch, cfg, anchor)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("gradient component {i} is {}", grad[i])));
    }
    let mut next: Vec<f64> = params
        .as_slice()
        .iter()
        .zip(&grad)
        .map(|(t, g)| t - cfg.lr * g)
        .collect();
    if cfg.kind.ensemble() {
        for (t, t0) in next.iter_mut().zip(anchor.params.as_slice()) {
            *t = cfg.alpha * *t + (1.0 - cfg.alpha) * t0;
        }
    }
    ParamVector::new(next)
}

/// Diagonal Fisher estimate: mean over batches of the squared entropy
/// gradient at `params`.
pub fn estimate_fisher(
    model: &AdaptableClassifier,
    params: &ParamVector,
    source_batches: &[Matrix],
) -> Result<Vec<f64>> {
    if source_batches.is_empty() {
        return Err(Error::InsufficientData("Fisher estimate needs at least one batch".into()));
    }
    let cfg = ObjectiveConfig::single(ObjectiveKind::Entropy);
    let anchor = SourceAnchor::plain(params.clone());
    let mut acc = vec![0.0; params.dim()];
    for batch in source_batches {
        let (_, g) = objective_gradient(model, params, batch, &cfg, &anchor)?;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi * gi;
        }
    }
    let n = source_batches.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Cross-entropy minibatch SGD over the head and the affine parameters.
pub fn train_source(
    spec: &ClassifierSpec,
    data: &LabeledData,
    epochs: usize,
    lr: f64,
) -> Result<(AdaptableClassifier, ParamVector)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("source data is empty".into()));
    }
    let (mut model, params) = AdaptableClassifier::init(spec, data.input_dim(), data.classes)?;
    let h = model.hidden_dim();
    let classes = model.classes();
    let mut theta = params.into_vec();
    let feats = model.features(&data.inputs)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::seeded(spec.seed, 1);

    for epoch in 0..epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(TRAIN_BATCH) {
            let scale = 1.0 / chunk.len() as f64;
            let mut g_head = Matrix::zeros(classes, h);
            let mut g_bias = vec![0.0; classes];
            let mut g_theta = vec![0.0; 2 * h];
            for &i in chunk {
                let f = feats.row(i);
                let u: Vec<f64> = (0..h).map(|j| theta[j] * f[j] + theta[h + j]).collect();
                let mut p = model.head.mul_vec(&u);
                for (pk, bk) in p.iter_mut().zip(&model.bias) {
                    *pk += bk;
                }
                info::softmax_in_place(&mut p);
                let y = data.labels[i];
                epoch_loss -= p[y].max(f64::MIN_POSITIVE).ln();
                let mut dz = p;
                dz[y] -= 1.0;
                for k in 0..classes {
                    let row = g_head.row_mut(k);
                    for j in 0..h {
                        row[j] += scale * dz[k] * u[j];
                    }
                    g_bias[k] += scale * dz[k];
                }
                let du = model.head.tr_mul_vec(&dz);
                for j in 0..h {
                    g_theta[j] += scale * du[j] * f[j];
                    g_theta[h + j] += scale * du[j];
                }
            }
            for (w, g) in model.head.as_mut_slice().iter_mut().zip(g_head.as_slice()) {
                *w -= lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&g_bias) {
                *b -= lr * g;
            }
            for (t, g) in theta.iter_mut().zip(&g_theta) {
                *t -= lr * g;
            }
        }
        let finite = theta.iter().chain(&model.bias).all(|t| t.is_finite()) && model.head.all_finite();
        if !epoch_loss.is_finite() || !finite {
            return Err(Error::Training(format!("loss became non-finite in epoch {epoch}")));
        }
    }
    Ok((model, ParamVector::new(theta)?))
}
