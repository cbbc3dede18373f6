use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::domain::{sample_batch, DomainSpec, Transform};
use super::source::SourceDistribution;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

const ORDER_TAG: u64 = 0x0de5;
const SAMPLE_TAG: u64 = 0x5a3b;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Fixed order `1..=K` every visit.
    Csc,
    /// A fresh seeded permutation every visit.
    Cdc,
    /// Linear ramps between consecutive domains of a CDC-style path.
    Ccc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub kind: ScenarioKind,
    pub domain_count: usize,
    pub visits: usize,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    pub order_seed: u64,
}

impl Default for ScenarioPlan {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Csc,
            domain_count: 8,
            visits: 20,
            batches_per_domain: 25,
            batch_size: 64,
            order_seed: 1,
        }
    }
}

/// Where the stream is at one step: blend `frac` of the way from `from` to
/// `to` (always `frac = 0` outside CCC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub visit: usize,
    pub from: usize,
    pub to: usize,
    pub frac: f64,
}

impl Position {
    /// Ground-truth id reported for the step.
    pub fn domain(&self) -> usize {
        if self.frac < 0.5 {
            self.from
        } else {
            self.to
        }
    }
}

impl ScenarioPlan {
    pub fn steps_per_visit(&self) -> usize {
        self.domain_count * self.batches_per_domain
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_visit() * self.visits
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.domain_count == 0 {
            bad.push("domain_count must be positive");
        }
        if self.batches_per_domain == 0 {
            bad.push("batches_per_domain must be positive");
        }
        if self.batch_size < 2 {
            bad.push("batch_size must be at least 2");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join(", ")))
        }
    }

    /// Domain ids in visit order for `visit`.
    pub fn visit_order(&self, visit: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (1..=self.domain_count).collect();
        if self.kind != ScenarioKind::Csc {
            let mut r = rng::seeded(rng::derive(self.order_seed, ORDER_TAG), visit as u64);
            order.shuffle(&mut r);
        }
        order
    }

    pub fn position(&self, step: usize) -> Result<Position> {
        if step >= self.total_steps() {
            return Err(Error::EndOfStream(step));
        }
        let spv = self.steps_per_visit();
        let visit = step / spv;
        let slot = (step % spv) / self.batches_per_domain;
        let from = self.visit_order(visit)[slot];
        if self.kind != ScenarioKind::Ccc {
            return Ok(Position {
                visit,
                from,
                to: from,
                frac: 0.0,
            });
        }
        let to = if slot + 1 < self.domain_count {
            self.visit_order(visit)[slot + 1]
        } else if visit + 1 < self.visits {
            self.visit_order(visit + 1)[0]
        } else {
            from
        };
        let frac = (step % self.batches_per_domain) as f64 / self.batches_per_domain as f64;
        Ok(Position { visit, from, to, frac })
    }
}

/// A labelled batch with its hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub step: usize,
    pub visit: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub domain: usize,
}

/// Batches of a plan over fixed domains. Each step draws from its own
/// counter-seeded generator, so any step can be produced independently.
#[derive(Debug, Clone)]
pub struct DomainStream<'a> {
    plan: ScenarioPlan,
    source: &'a SourceDistribution,
    transforms: Vec<Transform>,
}

impl<'a> DomainStream<'a> {
    /// `domains[i]` must carry id `i + 1`.
    pub fn new(plan: ScenarioPlan, source: &'a SourceDistribution, domains: &[DomainSpec]) -> Result<Self> {
        plan.validate()?;
        if domains.len() < plan.domain_count {
            return Err(Error::Config(format!(
                "plan needs {} domains, {} available",
                plan.domain_count,
                domains.len()
            )));
        }
        if let Some((i, d)) = domains.iter().enumerate().find(|(i, d)| d.id != i + 1) {
            return Err(Error::Config(format!("domain at position {i} has id {}", d.id)));
        }
        if domains.iter().any(|d| d.dim() != source.input_dim()) {
            return Err(Error::Config("domain dimension differs from the source".into()));
        }
        let mut transforms = vec![DomainSpec::source(source.input_dim()).transform()];
        transforms.extend(domains.iter().map(DomainSpec::transform));
        Ok(Self {
            plan,
            source,
            transforms,
        })
    }

    pub fn plan(&self) -> &ScenarioPlan {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.plan.total_steps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_batch(&self, step: usize) -> Result<StreamBatch> {
        let pos = self.plan.position(step)?;
        let mut r = rng::seeded(rng::derive(self.plan.order_seed, SAMPLE_TAG), step as u64);
        let t = if pos.frac == 0.0 {
            self.transforms[pos.from].clone()
        } else {
            Transform::lerp(&self.transforms[pos.from], &self.transforms[pos.to], pos.frac)
        };
        let (inputs, labels) = sample_batch(self.source, &t, self.plan.batch_size, &mut r);
        Ok(StreamBatch {
            step,
            visit: pos.visit,
            inputs,
            labels,
            domain: pos.domain(),
        })
    }
}
