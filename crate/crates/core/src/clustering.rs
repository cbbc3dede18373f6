//! Online domain discovery over style vectors.
//!
//! Centroids start from the mean source style. A batch whose style lies
//! farther than `tau` from every centroid opens a new domain (until `k_max`
//! is reached). A reservoir-sampled buffer of past styles feeds a
//! mutual-information objective whose gradient refines the centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info;
use crate::matrix::{sq_distance, Matrix};
use crate::rng::SimRng;
use crate::style::StyleVector;

/// How style-to-centroid distances enter the assignment logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// logit = -‖s − c‖ / √d
    #[default]
    Euclidean,
    /// logit = -‖s − c‖² / √d
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    centroids: Vec<Vec<f64>>,
    k_max: usize,
    dim: usize,
    metric: DistanceKind,
}

impl CentroidSet {
    /// One centroid (the source style); `K_0 = 1`.
    pub fn new(source_mean: &StyleVector, k_max: usize, metric: DistanceKind) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(Self {
            centroids: vec![source_mean.as_slice().to_vec()],
            k_max,
            dim: source_mean.dim(),
            metric,
        })
    }

    pub fn from_centroids(
        centroids: Vec<Vec<f64>>,
        k_max: usize,
        metric: DistanceKind,
    ) -> Result<Self> {
        let dim = centroids.first().map_or(0, Vec::len);
        if centroids.is_empty() || dim == 0 {
            return Err(Error::InsufficientData("centroid set needs at least one centroid".into()));
        }
        if centroids.len() > k_max {
            return Err(Error::Config(format!(
                "{} centroids exceed k_max = {k_max}",
                centroids.len()
            )));
        }
        if centroids
            .iter()
            .any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InputDomain("centroids must share a dimension and be finite".into()));
        }
        Ok(Self {
            centroids,
            k_max,
            dim,
            metric,
        })
    }

    pub fn count(&self) -> usize {
        self.centroids.len()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> DistanceKind {
        self.metric
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k]
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    fn check_dim(&self, s: &StyleVector) -> Result<()> {
        if s.dim() != self.dim {
            return Err(Error::InputDomain(format!(
                "style dimension {} does not match centroid dimension {}",
                s.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    #[inline]
    fn logit(&self, s: &[f64], k: usize) -> f64 {
        let sq = sq_distance(s, &self.centroids[k]);
        let scale = (self.dim as f64).sqrt();
        match self.metric {
            DistanceKind::Euclidean => -sq.sqrt() / scale,
            DistanceKind::SquaredEuclidean => -sq / scale,
        }
    }

    fn assignment_row(&self, s: &[f64]) -> Vec<f64> {
        let mut row: Vec<f64> = (0..self.count()).map(|k| self.logit(s, k)).collect();
        info::softmax_in_place(&mut row);
        row
    }
}

/// Fixed-capacity uniform sample over every style ever offered.
#[derive(Debug, Clone)]
pub struct StyleReservoir {
    buffer: Vec<StyleVector>,
    seen: u64,
    capacity: usize,
    rng: SimRng,
}

impl StyleReservoir {
    pub fn new(capacity: usize, rng: SimRng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("style reservoir capacity must be positive".into()));
        }
        Ok(Self {
            buffer: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
            capacity,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn styles(&self) -> &[StyleVector] {
        &self.buffer
    }

    /// Offers `s`: appended while `t ≤ M`, afterwards it replaces a uniformly
    /// chosen slot with probability `M / t`.
    pub fn offer(&mut self, s: StyleVector) -> Result<()> {
        let t = self.seen + 1;
        let (accept, slot) = if t as usize <= self.capacity {
            (true, 0)
        } else {
            let accept = self.rng.random::<f64>() < self.capacity as f64 / t as f64;
            let slot = if accept {
                self.rng.random_range(0..self.capacity)
            } else {
                0
            };
            (accept, slot)
        };
        self.offer_decided(s, accept, slot)
    }

    /// The deterministic transition behind [`offer`](Self::offer), with the
    /// coin flip and replacement slot supplied by the caller.
    pub fn offer_decided(&mut self, s: StyleVector, accept: bool, slot: usize) -> Result<()> {
        if let Some(first) = self.buffer.first() {
            if first.dim() != s.dim() {
                return Err(Error::InputDomain(format!(
                    "style dimension {} does not match reservoir dimension {}",
                    s.dim(),
                    first.dim()
                )));
            }
        }
        self.seen += 1;
        if self.buffer.len() < self.capacity {
            self.buffer.push(s);
        } else if accept {
            self.buffer[slot % self.capacity] = s;
        }
        Ok(())
    }
}

/// Row-stochastic soft assignment of reservoir styles to centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(Matrix);

impl AssignmentMatrix {
    /// Validates rows (entries in [0,1], sums within 1e-9 of 1).
    pub fn new(q: Matrix) -> Result<Self> {
        for (i, row) in q.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InputDomain(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self(q))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn marginal(&self) -> Vec<f64> {
        info::marginal(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum DecisionKind {
    Existing(usize),
    NewDomain(usize),
}

impl DecisionKind {
    pub fn index(self) -> usize {
        match self {
            DecisionKind::Existing(i) | DecisionKind::NewDomain(i) => i,
        }
    }

    pub fn is_new(self) -> bool {
        matches!(self, DecisionKind::NewDomain(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDecision {
    pub kind: DecisionKind,
    /// Minimum distance to the centroids present before the decision.
    pub distance: f64,
    /// Soft assignment against the post-decision centroid set.
    pub soft_assignment: Vec<f64>,
}

/// New-domain test: opens a centroid at `s` when it is farther than `tau`
/// from every centroid and the cap allows it; otherwise reports the nearest.
pub fn detect(centroids: &mut CentroidSet, s: &StyleVector, tau: f64) -> Result<DomainDecision> {
    centroids.check_dim(s)?;
    let (nearest, sq) = centroids
        .centroids
        .iter()
        .enumerate()
        .map(|(k, c)| (k, sq_distance(s.as_slice(), c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let distance = sq.sqrt();
    let kind = if distance > tau && centroids.count() < centroids.k_max {
        centroids.centroids.push(s.as_slice().to_vec());
        DecisionKind::NewDomain(centroids.count() - 1)
    } else {
        DecisionKind::Existing(nearest)
    };
    Ok(DomainDecision {
        kind,
        distance,
        soft_assignment: centroids.assignment_row(s.as_slice()),
    })
}

pub fn soft_assign_matrix(
    reservoir: &StyleReservoir,
    centroids: &CentroidSet,
) -> Result<AssignmentMatrix> {
    if reservoir.is_empty() {
        return Err(Error::InsufficientData("soft assignment over an empty reservoir".into()));
    }
    let k = centroids.count();
    let mut q = Matrix::zeros(reservoir.len(), k);
    for (i, s) in reservoir.styles().iter().enumerate() {
        centroids.check_dim(s)?;
        q.row_mut(i).copy_from_slice(&centroids.assignment_row(s.as_slice()));
    }
    Ok(AssignmentMatrix(q))
}

pub fn soft_assign_vector(s: &StyleVector, centroids: &CentroidSet) -> Result<Vec<f64>> {
    centroids.check_dim(s)?;
    Ok(centroids.assignment_row(s.as_slice()))
}

/// Mean assignment entropy plus negative entropy of the marginal.
pub fn mi_loss(q: &AssignmentMatrix) -> f64 {
    info::mi_loss(&q.0)
}

/// Analytic gradient of `mi_loss(soft_assign_matrix(R, C))` with respect to
/// every centroid.
pub fn mi_grad_centroids(
    reservoir: &StyleReservoir,
    centroids: &CentroidSet,
) -> Result<Vec<Vec<f64>>> {
    let k = centroids.count();
    let d = centroids.dim();
    let mut grads = vec![vec![0.0; d]; k];
    if k == 1 {
        if reservoir.is_empty() {
            return Err(Error::InsufficientData("gradient over an empty reservoir".into()));
        }
        return Ok(grads);
    }
    let q = soft_assign_matrix(reservoir, centroids)?;
    let m = q.0.rows() as f64;
    let bar = q.marginal();
    let ln_bar: Vec<f64> = bar.iter().map(|&b| if b > 0.0 { b.ln() } else { 0.0 }).collect();
    let scale = (d as f64).sqrt();

    let mut w = vec![0.0; k];
    for (i, s) in reservoir.styles().iter().enumerate() {
        let row = q.0.row(i);
        // w_ij = q_ij ∂L/∂q_ij, with ∂L/∂q_ij = (ln q̄_j − ln q_ij) / M
        let mut total = 0.0;
        for j in 0..k {
            w[j] = if row[j] > 0.0 {
                row[j] * (ln_bar[j] - row[j].ln()) / m
            } else {
                0.0
            };
            total += w[j];
        }
        for j in 0..k {
            // ∂L/∂logit_ij through the row softmax
            let g_logit = w[j] - row[j] * total;
            if g_logit == 0.0 {
                continue;
            }
            let c = &centroids.centroids[j];
            let factor = match centroids.metric {
                DistanceKind::Euclidean => {
                    let dist = sq_distance(s.as_slice(), c).sqrt();
                    if dist == 0.0 {
                        continue;
                    }
                    g_logit / (dist * scale)
                }
                DistanceKind::SquaredEuclidean => 2.0 * g_logit / scale,
            };
            for ((g, &sv), &cv) in grads[j].iter_mut().zip(s.as_slice()).zip(c) {
                *g += factor * (sv - cv);
            }
        }
    }
    Ok(grads)
}

fn check_grads(grads: &[Vec<f64>]) -> Result<()> {
    for (k, g) in grads.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "centroid {k} gradient component {i} is {}",
                g[i]
            )));
        }
    }
    Ok(())
}

/// Plain gradient descent on the MI loss; the source centroid is not frozen.
pub fn update_centroids(
    centroids: &CentroidSet,
    reservoir: &StyleReservoir,
    lr: f64,
    steps: usize,
) -> Result<CentroidSet> {
    let mut out = centroids.clone();
    let mut opt = CentroidOptimizer::sgd();
    for _ in 0..steps {
        opt.step(&mut out, reservoir, lr)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Centroid optimizer; moment buffers grow as domains are added.
#[derive(Debug, Clone)]
pub struct CentroidOptimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl CentroidOptimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn step(
        &mut self,
        centroids: &mut CentroidSet,
        reservoir: &StyleReservoir,
        lr: f64,
    ) -> Result<()> {
        let grads = mi_grad_centroids(reservoir, centroids)?;
        check_grads(&grads)?;
        self.apply(centroids, &grads, lr);
        Ok(())
    }

    fn apply(&mut self, centroids: &mut CentroidSet, grads: &[Vec<f64>], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (c, g) in centroids.centroids.iter_mut().zip(grads) {
                    for (cv, gv) in c.iter_mut().zip(g) {
                        *cv -= lr * gv;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let d = centroids.dim;
                while self.first.len() < centroids.count() {
                    self.first.push(vec![0.0; d]);
                    self.second.push(vec![0.0; d]);
                }
                self.steps += 1;
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for (k, (c, g)) in centroids.centroids.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..d {
                        c[i] *= 1.0 - lr * weight_decay;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        c[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sv(v: &[f64]) -> StyleVector {
        StyleVector::new(v.to_vec()).unwrap()
    }

    fn set(cs: &[&[f64]], k_max: usize) -> CentroidSet {
        CentroidSet::from_centroids(
            cs.iter().map(|c| c.to_vec()).collect(),
            k_max,
            DistanceKind::Euclidean,
        )
        .unwrap()
    }

    fn reservoir_of(styles: &[Vec<f64>]) -> StyleReservoir {
        let mut r = StyleReservoir::new(styles.len().max(1), rng::seeded(0, 0)).unwrap();
        for s in styles {
            r.offer(sv(s)).unwrap();
        }
        r
    }

    fn gaussian_points(n: usize, d: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed, 0);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn first_offers_fill_in_order() {
        let mut r = StyleReservoir::new(4, rng::seeded(1, 0)).unwrap();
        for i in 0..4 {
            r.offer(sv(&[i as f64])).unwrap();
        }
        let got: Vec<f64> = r.styles().iter().map(|s| s.as_slice()[0]).collect();
        assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(r.offer(sv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn forced_coins_degenerate_as_expected() {
        // always-reject: first M stay forever
        let mut frozen = StyleReservoir::new(3, rng::seeded(0, 0)).unwrap();
        // always-accept: every late offer lands somewhere
        let mut churn = StyleReservoir::new(3, rng::seeded(0, 0)).unwrap();
        for i in 0..50u64 {
            frozen.offer_decided(sv(&[i as f64]), false, 0).unwrap();
            churn.offer_decided(sv(&[i as f64]), true, (i * 7) as usize).unwrap();
            assert_eq!(frozen.len(), (i as usize + 1).min(3));
            assert_eq!(churn.len(), (i as usize + 1).min(3));
        }
        let f: Vec<f64> = frozen.styles().iter().map(|s| s.as_slice()[0]).collect();
        assert_eq!(f, vec![0.0, 1.0, 2.0]);
        assert!(churn.styles().iter().any(|s| s.as_slice()[0] == 49.0));
    }

    #[test]
    fn singleton_reservoir_occupant_is_uniform() {
        let trials = 10_000u64;
        let t = 1000;
        let mut hits = [0u32; 3];
        let spots = [0usize, 499, 999];
        for trial in 0..trials {
            let mut r = StyleReservoir::new(1, rng::seeded(77, trial)).unwrap();
            for i in 0..t {
                r.offer(sv(&[i as f64])).unwrap();
            }
            let occupant = r.styles()[0].as_slice()[0] as usize;
            for (h, &s) in hits.iter_mut().zip(&spots) {
                if occupant == s {
                    *h += 1;
                }
            }
        }
        let p = 1.0 / t as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!(
                (h as f64 - trials as f64 * p).abs() <= 3.0 * sigma,
                "count {h} outside 10 ± {:.2}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn detect_examples() {
        let mut c = set(&[&[0.0, 0.0]], 16);
        let d = detect(&mut c, &sv(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(d.kind, DecisionKind::Existing(0));
        assert_eq!(d.distance, 0.0);
        assert_eq!(d.soft_assignment, vec![1.0]);

        let d = detect(&mut c, &sv(&[3.0, 4.0]), 2.0).unwrap();
        assert_eq!(d.kind, DecisionKind::NewDomain(1));
        assert_eq!(d.distance, 5.0);
        assert_eq!(c.centroids(), &[vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_eq!(d.soft_assignment.len(), 2);
    }

    #[test]
    fn detect_respects_cap_and_ties() {
        let mut c = set(&[&[-1.0], &[1.0]], 2);
        let d = detect(&mut c, &sv(&[0.0]), 0.5).unwrap();
        // equidistant: lowest index; cap reached so no new domain
        assert_eq!(d.kind, DecisionKind::Existing(0));
        assert_eq!(c.count(), 2);
        let d = detect(&mut c, &sv(&[100.0]), 0.5).unwrap();
        assert_eq!(d.kind, DecisionKind::Existing(1));
        assert!(detect(&mut c, &sv(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn soft_assignment_examples() {
        let c = set(&[&[-1.0, 0.0], &[1.0, 0.0]], 4);
        let q = soft_assign_vector(&sv(&[0.0, 3.0]), &c).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);

        let single = set(&[&[2.0, 2.0]], 4);
        let r = reservoir_of(&gaussian_points(5, 2, 1.0, 3));
        let m = soft_assign_matrix(&r, &single).unwrap();
        assert!(m.matrix().iter_rows().all(|row| row == [1.0]));

        let three = set(&[&[0.0, 0.0], &[10.0, 0.0], &[0.0, 10.0]], 4);
        let q = soft_assign_vector(&sv(&[10.0, 0.0]), &three).unwrap();
        assert!(q[1] > q[0] && q[1] > q[2]);

        assert!(soft_assign_matrix(
            &StyleReservoir::new(3, rng::seeded(0, 0)).unwrap(),
            &single
        )
        .is_err());
    }

    #[test]
    fn midpoint_of_collinear_centroids_is_symmetric() {
        let c = set(&[&[-2.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]], 4);
        let q = soft_assign_vector(&sv(&[0.0, 0.0]), &c).unwrap();
        // direct evaluation: logits (-2/√2, 0, -2/√2)
        let e = (-2.0 / 2f64.sqrt()).exp();
        let a = e / (1.0 + 2.0 * e);
        assert!((q[0] - a).abs() < 1e-15 && (q[2] - a).abs() < 1e-15);
        assert!((q[1] - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-15);
    }

    #[test]
    fn assignment_matches_naive_softmax() {
        let pts = gaussian_points(8, 4, 2.0, 5);
        let cents = gaussian_points(3, 4, 2.0, 6);
        let r = reservoir_of(&pts);
        let c = CentroidSet::from_centroids(cents.clone(), 8, DistanceKind::Euclidean).unwrap();
        let q = soft_assign_matrix(&r, &c).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let e: Vec<f64> = cents
                .iter()
                .map(|c| {
                    let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d.sqrt() / 2.0).exp()
                })
                .collect();
            let z: f64 = e.iter().sum();
            for j in 0..3 {
                let want = e[j] / z;
                let got = q.matrix().get(i, j);
                assert!((got - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn mi_loss_analytic_values() {
        let k = 4;
        let uniform = Matrix::from_vec(6, k, vec![0.25; 24]).unwrap();
        assert!(mi_loss(&AssignmentMatrix::new(uniform).unwrap()).abs() < 1e-15);

        let mut balanced = Matrix::zeros(8, k);
        let mut collapsed = Matrix::zeros(8, k);
        for i in 0..8 {
            balanced.set(i, i % k, 1.0);
            collapsed.set(i, 0, 1.0);
        }
        let lb = mi_loss(&AssignmentMatrix::new(balanced).unwrap());
        assert!((lb + (k as f64).ln()).abs() < 1e-15);
        assert_eq!(mi_loss(&AssignmentMatrix::new(collapsed).unwrap()), 0.0);
    }

    /// Loss as a function of flattened centroids, for finite differences.
    fn loss_at(r: &StyleReservoir, cents: &[Vec<f64>], metric: DistanceKind) -> f64 {
        let c = CentroidSet::from_centroids(cents.to_vec(), 64, metric).unwrap();
        mi_loss(&soft_assign_matrix(r, &c).unwrap())
    }

    pub(crate) fn fd_check(seed: u64, m: usize, k: usize, d: usize, metric: DistanceKind) -> f64 {
        let r = reservoir_of(&gaussian_points(m, d, 2.0, seed));
        let cents = gaussian_points(k, d, 2.0, seed + 1000);
        let c = CentroidSet::from_centroids(cents.clone(), 64, metric).unwrap();
        let g = mi_grad_centroids(&r, &c).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..k {
            for i in 0..d {
                let mut plus = cents.clone();
                let mut minus = cents.clone();
                plus[j][i] += h;
                minus[j][i] -= h;
                let fd = (loss_at(&r, &plus, metric) - loss_at(&r, &minus, metric)) / (2.0 * h);
                let rel = (g[j][i] - fd).abs() / fd.abs().max(g[j][i].abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        assert!(fd_check(1, 16, 3, 6, DistanceKind::Euclidean) < 1e-5);
        assert!(fd_check(2, 16, 3, 6, DistanceKind::SquaredEuclidean) < 1e-5);
    }

    #[test]
    fn single_centroid_gradient_is_zero() {
        let r = reservoir_of(&gaussian_points(10, 3, 1.0, 9));
        let c = set(&[&[0.5, 0.5, 0.5]], 4);
        assert_eq!(mi_grad_centroids(&r, &c).unwrap(), vec![vec![0.0; 3]]);
    }

    #[test]
    fn mirrored_configuration_has_mirrored_gradients() {
        let pts = vec![
            vec![-3.0, 1.0],
            vec![3.0, 1.0],
            vec![-2.0, -1.0],
            vec![2.0, -1.0],
        ];
        let r = reservoir_of(&pts);
        let c = set(&[&[-1.0, 0.5], &[1.0, 0.5]], 4);
        let g = mi_grad_centroids(&r, &c).unwrap();
        assert!((g[0][0] + g[1][0]).abs() < 1e-15);
        assert!((g[0][1] - g[1][1]).abs() < 1e-15);
        assert!(g[0][0].abs() > 0.0);
    }

    #[test]
    fn update_zero_lr_and_single_step() {
        let r = reservoir_of(&gaussian_points(12, 3, 1.5, 10));
        let c = CentroidSet::from_centroids(gaussian_points(3, 3, 1.5, 11), 8, DistanceKind::Euclidean)
            .unwrap();
        assert_eq!(update_centroids(&c, &r, 0.0, 5).unwrap(), c);
        let g = mi_grad_centroids(&r, &c).unwrap();
        let lr = 0.3;
        let next = update_centroids(&c, &r, lr, 1).unwrap();
        for k in 0..3 {
            for i in 0..3 {
                assert_eq!(next.centroid(k)[i], c.centroid(k)[i] - lr * g[k][i]);
            }
        }
    }

    #[test]
    fn descent_from_perturbed_means_is_monotone() {
        // two well-separated clusters in d = 4
        let d = 4;
        let mut pts = gaussian_points(100, d, 0.3, 12);
        for (i, p) in pts.iter_mut().enumerate() {
            let shift = if i % 2 == 0 { 3.0 } else { -3.0 };
            p.iter_mut().for_each(|v| *v += shift);
        }
        let r = reservoir_of(&pts);
        let mut c = set(&[&[2.8, 3.1, 2.9, 3.2], &[-3.2, -2.9, -3.1, -2.8]], 4);
        let lr = 1e-4;
        let mut prev = mi_loss(&soft_assign_matrix(&r, &c).unwrap());
        for _ in 0..200 {
            c = update_centroids(&c, &r, lr, 1).unwrap();
            let cur = mi_loss(&soft_assign_matrix(&r, &c).unwrap());
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn adamw_moves_every_centroid() {
        let r = reservoir_of(&gaussian_points(20, 3, 2.0, 13));
        let mut c = CentroidSet::from_centroids(gaussian_points(2, 3, 2.0, 14), 4, DistanceKind::Euclidean)
            .unwrap();
        let before = c.clone();
        let mut opt = CentroidOptimizer::new(OptimizerKind::adamw());
        opt.step(&mut c, &r, 1e-2).unwrap();
        for k in 0..2 {
            assert_ne!(c.centroid(k), before.centroid(k));
        }
    }

    proptest::proptest! {
        #[test]
        fn rows_are_stochastic_and_loss_bounded(
            pts in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 3), 1..12),
            cents in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 3), 1..6),
        ) {
            let r = reservoir_of(&pts);
            let c = CentroidSet::from_centroids(cents.clone(), 8, DistanceKind::Euclidean).unwrap();
            let q = soft_assign_matrix(&r, &c).unwrap();
            for row in q.matrix().iter_rows() {
                let s: f64 = row.iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let k = cents.len() as f64;
            let l = mi_loss(&q);
            proptest::prop_assert!(l >= -k.ln() - 1e-12 && l <= k.ln() + 1e-12);
        }

        #[test]
        fn detect_never_exceeds_cap_or_removes(
            pts in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 2), 1..40),
            k_max in 1usize..6,
            tau in 0.0f64..10.0,
        ) {
            let mut c = set(&[&[0.0, 0.0]], k_max);
            for p in &pts {
                let before = c.centroids().to_vec();
                detect(&mut c, &sv(p), tau).unwrap();
                proptest::prop_assert!(c.count() <= k_max);
                proptest::prop_assert_eq!(&c.centroids()[..before.len()], &before[..]);
            }
        }
    }
}
