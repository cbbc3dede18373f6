use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use rtta_core::stream::{harness_source_styles, run_episode, EpisodeMetrics, EpisodeSummary, Harness};
use rtta_core::style::{calibrate_threshold, mean_style, StyleVector};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{mean_std, write_file, write_json};

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub tau: f64,
    pub quantile: f64,
    /// Style dimension.
    pub d: usize,
    pub source_count: usize,
    pub mean: Vec<f64>,
}

fn read_styles(path: &Path) -> CliResult<Vec<StyleVector>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let raw: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(StyleVector::new)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn source_styles(cfg: &RunConfig) -> CliResult<Vec<StyleVector>> {
    match &cfg.style_file {
        Some(p) => read_styles(p),
        None => Ok(harness_source_styles(&cfg.harness())?),
    }
}

pub fn calibrate(cfg: &RunConfig) -> CliResult<CalibrationReport> {
    cfg.validate()?;
    let styles = source_styles(cfg)?;
    let cal = calibrate_threshold(&styles, cfg.clustering.quantile)?;
    let report = CalibrationReport {
        tau: cal.tau,
        quantile: cal.quantile,
        d: styles[0].dim(),
        source_count: cal.source_sample_count,
        mean: mean_style(&styles)?.into_vec(),
    };
    write_json(&cfg.output_dir.join("calibration.json"), &report)?;
    Ok(report)
}

pub fn export_styles(cfg: &RunConfig, out: &Path) -> CliResult<usize> {
    cfg.validate()?;
    let styles = harness_source_styles(&cfg.harness())?;
    let raw: Vec<&[f64]> = styles.iter().map(StyleVector::as_slice).collect();
    write_json(out, &raw)?;
    Ok(styles.len())
}

#[derive(Debug, Serialize)]
pub struct MethodAggregate {
    pub method: String,
    pub seeds: Vec<u64>,
    pub visit_mean: Vec<f64>,
    pub visit_std: Vec<f64>,
    pub mean_error: f64,
    pub mean_error_std: f64,
    pub final_detected_domains: Vec<usize>,
    pub invariant_violations: usize,
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub tau: f64,
    pub source_accuracy: f64,
    pub methods: Vec<MethodAggregate>,
}

fn aggregate(method: &str, seeds: &[u64], summaries: &[EpisodeSummary]) -> MethodAggregate {
    let visits = summaries.first().map_or(0, |s| s.visit_error.len());
    let (visit_mean, visit_std) = (0..visits)
        .map(|v| mean_std(&summaries.iter().map(|s| s.visit_error[v]).collect::<Vec<_>>()))
        .unzip();
    let (mean_error, mean_error_std) = mean_std(&summaries.iter().map(|s| s.mean_error).collect::<Vec<_>>());
    MethodAggregate {
        method: method.to_string(),
        seeds: seeds.to_vec(),
        visit_mean,
        visit_std,
        mean_error,
        mean_error_std,
        final_detected_domains: summaries
            .iter()
            .map(|s| s.detected_domains.last().copied().unwrap_or(0))
            .collect(),
        invariant_violations: summaries.iter().map(|s| s.invariant_violations).sum(),
    }
}

fn write_episode(cfg: &RunConfig, m: &EpisodeMetrics, seed: u64) -> CliResult<EpisodeSummary> {
    let stem = cfg.output_dir.join(format!("{}_seed{seed}", m.method));
    let mut csv = Vec::new();
    m.write_csv(&mut csv)?;
    write_file(&stem.with_extension("csv"), &csv)?;
    let summary = m.summary();
    write_json(&stem.with_extension("json"), &summary)?;
    if cfg.trace {
        let mut trace = Vec::new();
        m.write_trace(&mut trace)?;
        write_file(&stem.with_extension("trace.jsonl"), &trace)?;
    }
    Ok(summary)
}

/// Runs every configured method for every seed, writing per-seed files as
/// episodes finish and the aggregate after all of them.
pub fn run(cfg: &RunConfig) -> CliResult<Aggregate> {
    cfg.validate()?;
    let styles = cfg.style_file.as_deref().map(read_styles).transpose()?;
    let harness = Harness::build_with_styles(&cfg.harness(), styles)?;
    let methods = cfg.methods();
    let jobs: Vec<(usize, u64)> = (0..methods.len())
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let summaries: Vec<EpisodeSummary> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let metrics = run_episode(&harness, &cfg.plan(seed), &methods[m], seed)?;
            write_episode(cfg, &metrics, seed)
        })
        .collect::<CliResult<_>>()?;

    let per_method = summaries.chunks(cfg.seeds.len());
    let agg = Aggregate {
        tau: harness.calibration.tau,
        source_accuracy: harness.source_accuracy,
        methods: methods
            .iter()
            .zip(per_method)
            .map(|(m, s)| aggregate(&m.name, &cfg.seeds, s))
            .collect(),
    };
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
    Ok(agg)
}
