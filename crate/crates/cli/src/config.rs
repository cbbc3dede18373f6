//! The TOML run configuration. Every field has a default, so an empty file
//! (or no file at all) describes the reference setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rtta_core::clustering::{DistanceKind, OptimizerKind};
use rtta_core::model_reservoir::InitPolicy;
use rtta_core::stream::{
    CalibrationConfig, ClusteringConfig, HarnessConfig, MethodConfig, ScenarioKind, ScenarioPlan,
};
use rtta_core::theory::MIN_TRIALS;
use rtta_core::tta::{ObjectiveConfig, ObjectiveKind};

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "RTTA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One episode per seed; each seed drives both the visit order and the
    /// episode's own randomness.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// JSON array of source style vectors used instead of generated ones.
    pub style_file: Option<PathBuf>,
    /// Also write the per-step decision trace as JSON lines.
    pub trace: bool,
    pub world: WorldConfig,
    pub scenario: ScenarioConfig,
    pub method: MethodSection,
    pub clustering: ClusteringSection,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("rtta-out"),
            style_file: None,
            trace: false,
            world: WorldConfig::default(),
            scenario: ScenarioConfig::default(),
            method: MethodSection::default(),
            clustering: ClusteringSection::default(),
            theory: TheoryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub severity: f64,
    pub samples_per_class: usize,
    pub train_epochs: usize,
    pub source_count: usize,
    pub calibration_batch: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let h = HarnessConfig::default();
        Self {
            seed: h.seed,
            severity: h.severity,
            samples_per_class: h.samples_per_class,
            train_epochs: h.train_epochs,
            source_count: h.calibration.source_count,
            calibration_batch: h.calibration.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub domain_count: usize,
    pub visits: usize,
    pub batches_per_domain: usize,
    pub batch_size: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let p = ScenarioPlan::default();
        Self {
            kind: p.kind,
            domain_count: p.domain_count,
            visits: p.visits,
            batches_per_domain: p.batches_per_domain,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub objective: ObjectiveKind,
    pub reservoir: bool,
    /// With the reservoir on, also run the same objective on a single model.
    pub baseline: bool,
    pub lr: f64,
    pub entropy_margin: Option<f64>,
    /// Unset: 1000 with the reservoir, 2000 without.
    pub fisher_lambda: Option<f64>,
    /// Unset: 0.995 with the reservoir, 0.99 without.
    pub alpha: Option<f64>,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::FilteredFisher,
            reservoir: true,
            baseline: false,
            lr: ObjectiveConfig::DEFAULT_LR,
            entropy_margin: None,
            fisher_lambda: None,
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    /// Style reservoir capacity `M`.
    pub capacity: usize,
    pub k_max: usize,
    pub quantile: f64,
    pub centroid_lr: f64,
    pub centroid_steps: usize,
    pub optimizer: OptimizerKind,
    pub distance: DistanceKind,
    pub init: InitPolicy,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let c = ClusteringConfig::default();
        Self {
            capacity: c.capacity,
            k_max: c.k_max,
            quantile: CalibrationConfig::default().quantile,
            centroid_lr: c.centroid_lr,
            centroid_steps: c.centroid_steps,
            optimizer: c.optimizer,
            distance: c.distance,
            init: c.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub lr: f64,
    pub noise_std: f64,
    pub steps: usize,
    pub trials: usize,
    pub ensemble_trials: usize,
    pub alphas: Vec<f64>,
    pub recursion_steps: usize,
    pub recursion_dim: usize,
    pub recursion_alpha: f64,
    /// `(λ, ω, η)` triples.
    pub fisher_triples: Vec<[f64; 3]>,
    pub fisher_steps: usize,
    pub chebyshev_theta0: Vec<f64>,
    pub chebyshev_beta: f64,
    pub chebyshev_steps: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lr: 0.1,
            noise_std: 1.0,
            steps: 100,
            trials: 10_000,
            ensemble_trials: 100_000,
            alphas: vec![0.9, 0.99],
            recursion_steps: 1000,
            recursion_dim: 8,
            recursion_alpha: 0.9,
            fisher_triples: vec![[0.5, 1.0, 0.1], [1.0, 0.5, 0.05], [2.0, 0.25, 0.2]],
            fisher_steps: 100,
            chebyshev_theta0: vec![0.2, 0.0],
            chebyshev_beta: 1.0,
            chebyshev_steps: 200,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given. The
    /// output directory environment override is applied either way.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn harness(&self) -> HarnessConfig {
        let d = HarnessConfig::default();
        HarnessConfig {
            seed: self.world.seed,
            samples_per_class: self.world.samples_per_class,
            train_epochs: self.world.train_epochs,
            calibration: CalibrationConfig {
                source_count: self.world.source_count,
                batch_size: self.world.calibration_batch,
                quantile: self.clustering.quantile,
            },
            domain_count: self.scenario.domain_count,
            severity: self.world.severity,
            ..d
        }
    }

    pub fn plan(&self, seed: u64) -> ScenarioPlan {
        let s = &self.scenario;
        ScenarioPlan {
            kind: s.kind,
            domain_count: s.domain_count,
            visits: s.visits,
            batches_per_domain: s.batches_per_domain,
            batch_size: s.batch_size,
            order_seed: seed,
        }
    }

    fn method(&self, reservoir: bool) -> MethodConfig {
        let m = &self.method;
        let base = if reservoir {
            ObjectiveConfig::reservoir(m.objective)
        } else {
            ObjectiveConfig::single(m.objective)
        };
        let c = &self.clustering;
        MethodConfig {
            name: format!("{}{}", if reservoir { "reservoir_" } else { "" }, kind_name(m.objective)),
            objective: ObjectiveConfig {
                lr: m.lr,
                entropy_margin: m.entropy_margin,
                fisher_lambda: m.fisher_lambda.unwrap_or(base.fisher_lambda),
                alpha: m.alpha.unwrap_or(base.alpha),
                ..base
            },
            reservoir,
            clustering: ClusteringConfig {
                capacity: c.capacity,
                k_max: c.k_max,
                centroid_lr: c.centroid_lr,
                centroid_steps: c.centroid_steps,
                optimizer: c.optimizer,
                distance: c.distance,
                init: c.init,
            },
        }
    }

    /// The configured method first, then its single-model baseline if asked for.
    pub fn methods(&self) -> Vec<MethodConfig> {
        let mut out = vec![self.method(self.method.reservoir)];
        if self.method.reservoir && self.method.baseline {
            out.push(self.method(false));
        }
        out
    }

    /// Checks everything `run` and `calibrate` depend on, naming every
    /// offending field at once.
    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        if self.seeds.is_empty() {
            bad.push("seeds must not be empty".to_string());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            bad.push("seeds must be distinct".to_string());
        }
        let w = &self.world;
        if !(0.0..=1.0).contains(&w.severity) {
            bad.push(format!("world.severity = {} (must lie in [0, 1])", w.severity));
        }
        if w.samples_per_class == 0 {
            bad.push("world.samples_per_class must be positive".into());
        }
        if w.source_count < 2 {
            bad.push("world.source_count must be at least 2".into());
        }
        if w.calibration_batch < 2 {
            bad.push("world.calibration_batch must be at least 2".into());
        }
        let q = self.clustering.quantile;
        if !(q > 0.0 && q <= 1.0) {
            bad.push(format!("clustering.quantile = {q} (must lie in (0, 1])"));
        }
        if let Err(rtta_core::Error::Config(m)) = self.plan(0).validate() {
            bad.push(format!("scenario: {m}"));
        }
        for m in self.methods() {
            if let Err(rtta_core::Error::Config(msg)) = m.validate() {
                bad.push(msg);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self, checks: &[crate::theory::Check]) -> CliResult<()> {
        use crate::theory::Check;
        let mut bad = Vec::new();
        let needs_mc = checks
            .iter()
            .any(|c| matches!(c, Check::SgdVar | Check::EnsembleVar | Check::Chebyshev));
        if needs_mc {
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                bad.push(format!("theory.lr = {}", self.lr));
            }
            if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                bad.push(format!("theory.noise_std = {}", self.noise_std));
            }
        }
        for c in checks {
            match c {
                Check::SgdVar => {
                    if self.trials < MIN_TRIALS {
                        bad.push(format!("theory.trials = {} (need at least {MIN_TRIALS})", self.trials));
                    }
                    if self.steps < 2 {
                        bad.push("theory.steps must be at least 2".into());
                    }
                }
                Check::EnsembleVar => {
                    if self.ensemble_trials < MIN_TRIALS {
                        bad.push(format!(
                            "theory.ensemble_trials = {} (need at least {MIN_TRIALS})",
                            self.ensemble_trials
                        ));
                    }
                    if self.alphas.is_empty() {
                        bad.push("theory.alphas must not be empty".into());
                    }
                    for a in &self.alphas {
                        if !(*a > 0.0 && *a < 1.0) {
                            bad.push(format!("theory.alphas: {a} (must lie in (0, 1))"));
                        }
                    }
                }
                Check::Recursion => {
                    if self.recursion_steps == 0 || self.recursion_dim == 0 {
                        bad.push("theory.recursion_steps and theory.recursion_dim must be positive".into());
                    }
                }
                Check::FisherEquiv => {
                    if self.fisher_triples.is_empty() {
                        bad.push("theory.fisher_triples must not be empty".into());
                    }
                    for [l, o, e] in &self.fisher_triples {
                        let alpha = 1.0 - 2.0 * l * o * e;
                        if !(alpha > 0.0 && alpha <= 1.0) {
                            bad.push(format!(
                                "theory.fisher_triples: (λ, ω, η) = ({l}, {o}, {e}) gives α = {alpha}, outside (0, 1]"
                            ));
                        }
                    }
                }
                Check::Chebyshev => {
                    if self.trials < MIN_TRIALS {
                        bad.push(format!("theory.trials = {} (need at least {MIN_TRIALS})", self.trials));
                    }
                    let start = self.chebyshev_theta0.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if self.chebyshev_theta0.is_empty() {
                        bad.push("theory.chebyshev_theta0 must not be empty".into());
                    }
                    if !(self.chebyshev_beta > start) {
                        bad.push(format!(
                            "theory.chebyshev_beta = {} must exceed ‖θ₀ − θ*‖ = {start}",
                            self.chebyshev_beta
                        ));
                    }
                    if !(self.lr < 2.0) {
                        bad.push(format!("theory.lr = {} is not contractive on unit curvature", self.lr));
                    }
                }
            }
        }
        bad.dedup();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }
}

pub fn kind_name(kind: ObjectiveKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{kind:?}"))
}
