use std::io::Write;

use serde::{Deserialize, Serialize};

use super::domain::{make_domains, sample_batch, DomainGenConfig, DomainSpec, StyleProbe};
use super::scenario::{DomainStream, ScenarioPlan, StreamBatch};
use super::source::{SourceConfig, SourceDistribution};
use crate::clustering::{
    detect, soft_assign_vector, CentroidOptimizer, CentroidSet, DecisionKind, DistanceKind, OptimizerKind,
    StyleReservoir,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model_reservoir::{select_active, InitPolicy, ModelReservoir, ParamVector};
use crate::rng;
use crate::style::{
    calibrate_threshold, mean_style, ExtractorConfig, FeatureExtractor, StyleVector, ThresholdCalibration,
};
use crate::tta::{
    error_rate, estimate_fisher, train_source, tta_step, AdaptableClassifier, ClassifierSpec, ObjectiveConfig,
    ObjectiveKind, SourceAnchor,
};

const RESERVOIR_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Number of source style vectors.
    pub source_count: usize,
    /// Samples behind each source style vector.
    pub batch_size: usize,
    pub quantile: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            source_count: 2000,
            batch_size: 16,
            quantile: 0.99,
        }
    }
}

/// Everything that defines the synthetic world and its source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub seed: u64,
    pub source: SourceConfig,
    pub samples_per_class: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub classifier: ClassifierSpec,
    pub extractor: ExtractorConfig,
    pub calibration: CalibrationConfig,
    pub fisher_batches: usize,
    pub domains: DomainGenConfig,
    pub domain_count: usize,
    pub severity: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            source: SourceConfig::default(),
            samples_per_class: 200,
            train_epochs: 300,
            train_lr: 1.0,
            classifier: ClassifierSpec {
                seed: 1,
                hidden_dim: 32,
                ..ClassifierSpec::default()
            },
            extractor: ExtractorConfig::pointwise(SourceConfig::default().positions),
            calibration: CalibrationConfig::default(),
            fisher_batches: 32,
            domains: DomainGenConfig::default(),
            domain_count: 8,
            severity: 1.0,
        }
    }
}

/// Trained source model, calibrated detector and target domains.
#[derive(Debug, Clone)]
pub struct Harness {
    pub config: HarnessConfig,
    pub source: SourceDistribution,
    pub extractor: FeatureExtractor,
    pub model: AdaptableClassifier,
    pub anchor: SourceAnchor,
    pub calibration: ThresholdCalibration,
    pub source_mean: StyleVector,
    pub domains: Vec<DomainSpec>,
    /// Held-out accuracy of the source model on clean source data.
    pub source_accuracy: f64,
}

/// Sub-seed tags, one per independent random ingredient.
mod tag {
    pub const SOURCE: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const HELD_OUT: u64 = 3;
    pub const CALIBRATION: u64 = 4;
    pub const FISHER: u64 = 5;
    pub const DOMAINS: u64 = 6;
    pub const PROBE: u64 = 7;
}

/// Source style vectors used for threshold calibration.
pub fn source_styles(
    source: &SourceDistribution,
    extractor: &FeatureExtractor,
    cal: &CalibrationConfig,
    seed: u64,
) -> Result<Vec<StyleVector>> {
    let identity = DomainSpec::source(source.input_dim()).transform();
    let mut r = rng::seeded(seed, 0);
    (0..cal.source_count)
        .map(|_| extractor.extract_style(&sample_batch(source, &identity, cal.batch_size, &mut r).0))
        .collect()
}

/// The source styles [`Harness::build`] calibrates on, without training
/// the classifier or generating domains.
pub fn harness_source_styles(config: &HarnessConfig) -> Result<Vec<StyleVector>> {
    let source = SourceDistribution::new(&config.source, rng::derive(config.seed, tag::SOURCE))?;
    let extractor = FeatureExtractor::with_positions(source.input_dim(), source.positions(), &config.extractor)?;
    source_styles(&source, &extractor, &config.calibration, rng::derive(config.seed, tag::CALIBRATION))
}

impl Harness {
    pub fn build(config: &HarnessConfig) -> Result<Self> {
        Self::build_with_styles(config, None)
    }

    /// As [`Harness::build`], calibrating on `styles` when given.
    pub fn build_with_styles(config: &HarnessConfig, styles: Option<Vec<StyleVector>>) -> Result<Self> {
        let seed = config.seed;
        let source = SourceDistribution::new(&config.source, rng::derive(seed, tag::SOURCE))?;
        let train = source.dataset(config.samples_per_class, rng::derive(seed, tag::TRAIN))?;
        let held = source.dataset(config.samples_per_class, rng::derive(seed, tag::HELD_OUT))?;
        let (model, params) = train_source(&config.classifier, &train, config.train_epochs, config.train_lr)?;
        let source_accuracy = model.accuracy(&params, &held)?;

        let extractor = FeatureExtractor::with_positions(source.input_dim(), source.positions(), &config.extractor)?;
        let styles = match styles {
            Some(s) => s,
            None => source_styles(&source, &extractor, &config.calibration, rng::derive(seed, tag::CALIBRATION))?,
        };
        let calibration = calibrate_threshold(&styles, config.calibration.quantile)?;
        let source_mean = mean_style(&styles)?;

        let identity = DomainSpec::source(source.input_dim()).transform();
        let mut r = rng::seeded(rng::derive(seed, tag::FISHER), 0);
        let fisher_batches: Vec<Matrix> = (0..config.fisher_batches.max(1))
            .map(|_| sample_batch(&source, &identity, 64, &mut r).0)
            .collect();
        let fisher = estimate_fisher(&model, &params, &fisher_batches)?;
        let anchor = SourceAnchor::new(params, fisher)?;

        let probe = StyleProbe {
            source: &source,
            extractor: &extractor,
            source_mean: &source_mean,
            tau: calibration.tau,
            batch_size: 64,
            seed: rng::derive(seed, tag::PROBE),
        };
        let domains = make_domains(
            config.domain_count,
            config.severity,
            rng::derive(seed, tag::DOMAINS),
            &config.domains,
            &probe,
        )?;
        Ok(Self {
            config: config.clone(),
            source,
            extractor,
            model,
            anchor,
            calibration,
            source_mean,
            domains,
            source_accuracy,
        })
    }

    pub fn stream(&self, plan: ScenarioPlan) -> Result<DomainStream<'_>> {
        DomainStream::new(plan, &self.source, &self.domains)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// Style reservoir capacity `M`.
    pub capacity: usize,
    pub k_max: usize,
    pub centroid_lr: f64,
    pub centroid_steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default)]
    pub init: InitPolicy,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            capacity: 1024,
            k_max: 16,
            centroid_lr: 1e-4,
            centroid_steps: 1,
            optimizer: OptimizerKind::Sgd,
            distance: DistanceKind::Euclidean,
            init: InitPolicy::MutualInformation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    pub objective: ObjectiveConfig,
    /// Off: a single model (the loop runs with `k_max = 1`).
    pub reservoir: bool,
    #[serde(default)]
    pub clustering: ClusteringConfig,
}

impl MethodConfig {
    pub fn single(name: &str, kind: ObjectiveKind) -> Self {
        Self {
            name: name.into(),
            objective: ObjectiveConfig::single(kind),
            reservoir: false,
            clustering: ClusteringConfig::default(),
        }
    }

    pub fn with_reservoir(name: &str, kind: ObjectiveKind) -> Self {
        Self {
            name: name.into(),
            objective: ObjectiveConfig::reservoir(kind),
            reservoir: true,
            clustering: ClusteringConfig::default(),
        }
    }

    pub fn tent() -> Self {
        Self::single("tent", ObjectiveKind::Entropy)
    }

    pub fn eata() -> Self {
        Self::single("eata", ObjectiveKind::FilteredFisher)
    }

    pub fn reservoir_eata() -> Self {
        Self::with_reservoir("reservoir_eata", ObjectiveKind::FilteredFisher)
    }

    pub fn k_max(&self) -> usize {
        if self.reservoir {
            self.clustering.k_max
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(m)) = self.objective.validate() {
            bad.push(m);
        }
        let c = &self.clustering;
        if c.capacity == 0 {
            bad.push("clustering.capacity must be positive".into());
        }
        if c.k_max == 0 {
            bad.push("clustering.k_max must be positive".into());
        }
        if !(c.centroid_lr >= 0.0 && c.centroid_lr.is_finite()) {
            bad.push(format!("clustering.centroid_lr = {}", c.centroid_lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("method {}: {}", self.name, bad.join(", "))))
        }
    }
}

/// Everything recorded for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub visit: usize,
    pub true_domain: usize,
    pub assigned_model: usize,
    pub error: f64,
    /// Centroids beyond the source one.
    pub detected_domains: usize,
    /// `‖θ̄_t − θ₀‖` of the prediction parameters.
    pub drift_norm: f64,
    pub decision: DecisionKind,
    pub min_distance: f64,
    pub centroid_count: usize,
    pub soft_assignment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub method: String,
    pub seed: u64,
    pub plan: ScenarioPlan,
    pub steps: Vec<StepRecord>,
    /// Descriptions of isolation, alignment or purity failures.
    pub violations: Vec<String>,
}

/// Per-visit error tables for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub method: String,
    pub seed: u64,
    pub plan: ScenarioPlan,
    /// Mean error per visit.
    pub visit_error: Vec<f64>,
    /// `[visit][domain − 1]`; `None` when the domain was not seen that visit.
    pub visit_domain_error: Vec<Vec<Option<f64>>>,
    pub mean_error: f64,
    /// Detected domains at the end of each visit.
    pub detected_domains: Vec<usize>,
    pub invariant_violations: usize,
}

impl EpisodeMetrics {
    pub fn per_batch_error(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.error).collect()
    }

    pub fn visit_errors(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.plan.visits];
        let mut n = vec![0usize; self.plan.visits];
        for s in &self.steps {
            sum[s.visit] += s.error;
            n[s.visit] += 1;
        }
        sum.iter()
            .zip(&n)
            .filter(|(_, &k)| k > 0)
            .map(|(s, &k)| s / k as f64)
            .collect()
    }

    pub fn visit_domain_errors(&self) -> Vec<Vec<Option<f64>>> {
        let k = self.plan.domain_count;
        let mut sum = vec![vec![0.0; k]; self.plan.visits];
        let mut n = vec![vec![0usize; k]; self.plan.visits];
        for s in &self.steps {
            if (1..=k).contains(&s.true_domain) {
                sum[s.visit][s.true_domain - 1] += s.error;
                n[s.visit][s.true_domain - 1] += 1;
            }
        }
        sum.iter()
            .zip(&n)
            .map(|(row, cnt)| {
                row.iter()
                    .zip(cnt)
                    .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                    .collect()
            })
            .collect()
    }

    /// Detected-domain count at the end of each visit.
    pub fn detected_per_visit(&self) -> Vec<usize> {
        let spv = self.plan.steps_per_visit();
        (0..self.plan.visits)
            .filter_map(|v| self.steps.get((v + 1) * spv - 1).map(|s| s.detected_domains))
            .collect()
    }

    pub fn summary(&self) -> EpisodeSummary {
        let errs = self.per_batch_error();
        EpisodeSummary {
            method: self.method.clone(),
            seed: self.seed,
            plan: self.plan,
            visit_error: self.visit_errors(),
            visit_domain_error: self.visit_domain_errors(),
            mean_error: if errs.is_empty() {
                0.0
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            },
            detected_domains: self.detected_per_visit(),
            invariant_violations: self.violations.len(),
        }
    }

    /// Columns: step, visit, true_domain, assigned_model, error,
    /// detected_domains, drift_norm.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,visit,true_domain,assigned_model,error,detected_domains,drift_norm")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{:.17e},{},{:.17e}",
                s.step, s.visit, s.true_domain, s.assigned_model, s.error, s.detected_domains, s.drift_norm
            )?;
        }
        Ok(())
    }

    /// One JSON object per step: step, decision_kind, chosen_index,
    /// min_distance, centroid_count, soft_assignment.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            decision_kind: &'static str,
            chosen_index: usize,
            min_distance: f64,
            centroid_count: usize,
            soft_assignment: &'a [f64],
        }
        for s in &self.steps {
            let line = Line {
                step: s.step,
                decision_kind: if s.decision.is_new() { "new_domain" } else { "existing" },
                chosen_index: s.decision.index(),
                min_distance: s.min_distance,
                centroid_count: s.centroid_count,
                soft_assignment: &s.soft_assignment,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs the detect, adapt, ensemble and predict loop over the plan's stream.
pub fn run_episode(harness: &Harness, plan: &ScenarioPlan, method: &MethodConfig, seed: u64) -> Result<EpisodeMetrics> {
    let stream = harness.stream(*plan)?;
    run_on_batches(harness, plan, method, seed, |step| stream.next_batch(step))
}

/// As [`run_episode`], with batches supplied by `next`.
pub fn run_on_batches<F>(
    harness: &Harness,
    plan: &ScenarioPlan,
    method: &MethodConfig,
    seed: u64,
    mut next: F,
) -> Result<EpisodeMetrics>
where
    F: FnMut(usize) -> Result<StreamBatch>,
{
    method.validate()?;
    let cfg = &method.clustering;
    let mut state = EpisodeState {
        centroids: CentroidSet::new(&harness.source_mean, method.k_max(), cfg.distance)?,
        styles: StyleReservoir::new(cfg.capacity, rng::seeded(seed, RESERVOIR_STREAM))?,
        models: ModelReservoir::new(harness.anchor.params.clone()),
        optimizer: CentroidOptimizer::new(cfg.optimizer),
    };
    let mut metrics = EpisodeMetrics {
        method: method.name.clone(),
        seed,
        plan: *plan,
        steps: Vec::with_capacity(plan.total_steps()),
        violations: Vec::new(),
    };
    for step in 0..plan.total_steps() {
        let record = next(step)
            .and_then(|batch| state.step(harness, method, &batch, &mut metrics.violations))
            .map_err(|e| Error::at_step(step, e))?;
        metrics.steps.push(record);
    }
    Ok(metrics)
}

struct EpisodeState {
    centroids: CentroidSet,
    styles: StyleReservoir,
    models: ModelReservoir,
    optimizer: CentroidOptimizer,
}

fn same_bits(a: &ParamVector, b: &ParamVector) -> bool {
    a.as_slice().len() == b.as_slice().len()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

impl EpisodeState {
    fn step(
        &mut self,
        h: &Harness,
        method: &MethodConfig,
        batch: &StreamBatch,
        violations: &mut Vec<String>,
    ) -> Result<StepRecord> {
        let cfg = &method.clustering;
        let x = &batch.inputs;

        // (1) domain identification
        let s = h.extractor.extract_style(x)?;
        self.styles.offer(s.clone())?;
        let decision = detect(&mut self.centroids, &s, h.calibration.tau)?;
        if decision.kind.is_new() {
            match cfg.init {
                InitPolicy::MutualInformation => {
                    self.models.init_new_model(x, |p, b| h.model.predict(p, b))?;
                }
                InitPolicy::Source => {
                    self.models.init_from_source();
                }
            }
        }

        // (2) centroid update
        for _ in 0..cfg.centroid_steps {
            self.optimizer.step(&mut self.centroids, &self.styles, cfg.centroid_lr)?;
        }

        // (3) adapt the selected model
        let q = soft_assign_vector(&s, &self.centroids)?;
        let k = select_active(&q);
        let before = self.models.entries().to_vec();
        let updated = tta_step(&h.model, self.models.entry(k), x, &method.objective, &h.anchor)?;
        self.models.write_active(k, updated)?;
        for (j, (old, new)) in before.iter().zip(self.models.entries()).enumerate() {
            if j != k && !same_bits(old, new) {
                violations.push(format!("step {}: entry {j} changed while adapting {k}", batch.step));
            }
        }
        if self.models.len() != self.centroids.count() {
            violations.push(format!(
                "step {}: {} models for {} centroids",
                batch.step,
                self.models.len(),
                self.centroids.count()
            ));
        }

        // (4) ensemble and predict
        let snapshot = self.models.entries().to_vec();
        let theta_bar = self.models.ensemble_params(&q)?;
        let probs = h.model.predict(&theta_bar, x)?;
        if snapshot.iter().zip(self.models.entries()).any(|(a, b)| !same_bits(a, b)) {
            violations.push(format!("step {}: prediction modified the reservoir", batch.step));
        }

        Ok(StepRecord {
            step: batch.step,
            visit: batch.visit,
            true_domain: batch.domain,
            assigned_model: k,
            error: error_rate(&probs, &batch.labels),
            detected_domains: self.centroids.count() - 1,
            drift_norm: theta_bar.distance(&h.anchor.params),
            decision: decision.kind,
            min_distance: decision.distance,
            centroid_count: self.centroids.count(),
            soft_assignment: q,
        })
    }
}
