//! Synthetic source data, recurring domain streams and the episode runner.

mod domain;
mod episode;
mod scenario;
mod source;

pub use domain::{make_domains, sample_batch, DomainGenConfig, DomainSpec, StyleProbe, Transform, MAX_DOMAIN_ATTEMPTS};
pub use episode::{
    harness_source_styles, run_episode, run_on_batches, source_styles, CalibrationConfig, ClusteringConfig, EpisodeMetrics, EpisodeSummary,
    Harness, HarnessConfig, MethodConfig, StepRecord,
};
pub use scenario::{DomainStream, Position, ScenarioKind, ScenarioPlan, StreamBatch};
pub use source::{make_source_dataset, SourceConfig, SourceDistribution};
