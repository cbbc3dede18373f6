//! Pool of domain-specialized trainable parameter vectors.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info;
use crate::matrix::Matrix;

const MAGIC: &[u8; 4] = b"RTTA";
const CHECKPOINT_VERSION: u32 = 1;

/// Flat vector of trainable parameters; layout is owned by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InputDomain("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        crate::matrix::distance(&self.0, &other.0)
    }
}

/// How a newly discovered domain's parameters are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Clone the entry whose predictions on the triggering batch have the
    /// lowest mutual-information loss.
    #[default]
    MutualInformation,
    /// Clone the source parameters.
    Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReservoir {
    entries: Vec<ParamVector>,
    source: ParamVector,
}

impl ModelReservoir {
    /// Single entry initialized from the source parameters.
    pub fn new(source: ParamVector) -> Self {
        Self {
            entries: vec![source.clone()],
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source(&self) -> &ParamVector {
        &self.source
    }

    pub fn entry(&self, k: usize) -> &ParamVector {
        &self.entries[k]
    }

    pub fn entries(&self) -> &[ParamVector] {
        &self.entries
    }

    /// Appends a clone of the entry with minimal MI loss of its predictions
    /// on `batch` (ties → lowest index). Returns the new entry's index.
    pub fn init_new_model<F>(&mut self, batch: &Matrix, mut predictor: F) -> Result<usize>
    where
        F: FnMut(&ParamVector, &Matrix) -> Result<Matrix>,
    {
        if batch.rows() == 0 {
            return Err(Error::InsufficientData("model init on an empty batch".into()));
        }
        let mut best = (0, f64::INFINITY);
        for (k, entry) in self.entries.iter().enumerate() {
            let probs = predictor(entry, batch)?;
            if !probs.all_finite() {
                return Err(Error::Numerical(format!(
                    "reservoir entry {k} produced non-finite predictions"
                )));
            }
            let loss = info::mi_loss(&probs);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "reservoir entry {k} produced a non-finite MI loss"
                )));
            }
            if loss < best.1 {
                best = (k, loss);
            }
        }
        self.entries.push(self.entries[best.0].clone());
        Ok(self.entries.len() - 1)
    }

    pub fn init_from_source(&mut self) -> usize {
        self.entries.push(self.source.clone());
        self.entries.len() - 1
    }

    /// `Σ_k q_k θ_k`; used for prediction only.
    pub fn ensemble_params(&self, q: &[f64]) -> Result<ParamVector> {
        if q.len() != self.entries.len() {
            return Err(Error::InputDomain(format!(
                "assignment has {} weights for {} entries",
                q.len(),
                self.entries.len()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (w, entry) in q.iter().zip(&self.entries) {
            for (o, v) in out.iter_mut().zip(entry.as_slice()) {
                *o += w * v;
            }
        }
        Ok(ParamVector(out))
    }

    /// Replaces entry `index`; every other entry is left untouched.
    pub fn write_active(&mut self, index: usize, params: ParamVector) -> Result<()> {
        if index >= self.entries.len() {
            return Err(Error::InputDomain(format!(
                "entry {index} out of range for {} entries",
                self.entries.len()
            )));
        }
        if params.dim() != self.dim() {
            return Err(Error::InputDomain(format!(
                "parameter dimension {} does not match {}",
                params.dim(),
                self.dim()
            )));
        }
        self.entries[index] = params;
        Ok(())
    }

    /// Binary checkpoint: magic, version, entry count, dimension, then the
    /// source and every entry as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for p in std::iter::once(&self.source).chain(&self.entries) {
            for v in p.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: String| Error::Format { line: 0, msg };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad checkpoint magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        if count == 0 || dim == 0 {
            return Err(bad("checkpoint has no entries".into()));
        }
        let mut read_vec = || -> Result<ParamVector> {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut u64buf)?;
                v.push(f64::from_le_bytes(u64buf));
            }
            ParamVector::new(v)
        };
        let source = read_vec()?;
        let entries = (0..count).map(|_| read_vec()).collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, source })
    }
}

/// Argmax with ties resolved to the lowest index.
pub fn select_active(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    /// Predictor that ignores the batch content and emits rows chosen by the
    /// first parameter: 0 → uniform, 1 → balanced one-hot, 2 → collapsed.
    fn canned(p: &ParamVector, batch: &Matrix) -> Result<Matrix> {
        let k = 3;
        let mut m = Matrix::zeros(batch.rows(), k);
        for i in 0..batch.rows() {
            match p.as_slice()[0] as i64 {
                0 => m.row_mut(i).fill(1.0 / k as f64),
                1 => m.set(i, i % k, 1.0),
                _ => m.set(i, 0, 1.0),
            }
        }
        Ok(m)
    }

    #[test]
    fn singleton_is_cloned() {
        let mut r = ModelReservoir::new(pv(&[2.0, 5.0]));
        let k = r.init_new_model(&Matrix::zeros(6, 1), canned).unwrap();
        assert_eq!(k, 1);
        assert_eq!(r.entry(1), r.entry(0));
    }

    #[test]
    fn confident_and_diverse_entry_wins() {
        let mut r = ModelReservoir::new(pv(&[0.0, 9.0]));
        r.write_active(0, pv(&[0.0, 9.0])).unwrap();
        r.init_from_source();
        r.write_active(1, pv(&[1.0, 7.0])).unwrap();
        let k = r.init_new_model(&Matrix::zeros(6, 1), canned).unwrap();
        assert_eq!(r.entry(k), &pv(&[1.0, 7.0]));
    }

    #[test]
    fn init_matches_exhaustive_evaluation() {
        let mut r = rng::seeded(3, 0);
        let batch = Matrix::from_vec(10, 2, (0..20).map(|_| r.random_range(-2.0..2.0)).collect())
            .unwrap();
        // softmax(W x) with W given by the params (3 classes × 2 inputs)
        let predict = |p: &ParamVector, b: &Matrix| -> Result<Matrix> {
            let w = Matrix::from_vec(3, 2, p.as_slice().to_vec())?;
            let mut out = Matrix::zeros(b.rows(), 3);
            for (i, x) in b.iter_rows().enumerate() {
                out.row_mut(i).copy_from_slice(&info::softmax(&w.mul_vec(x)));
            }
            Ok(out)
        };
        let mut res = ModelReservoir::new(pv(&[0.1; 6]));
        for _ in 0..2 {
            let k = res.init_from_source();
            res.write_active(k, pv(&(0..6).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<_>>()))
                .unwrap();
        }
        let losses: Vec<f64> = res
            .entries()
            .iter()
            .map(|p| info::mi_loss(&predict(p, &batch).unwrap()))
            .collect();
        let want = (0..3)
            .min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
            .unwrap();
        let expected = res.entry(want).clone();
        let k = res.init_new_model(&batch, predict).unwrap();
        assert_eq!(res.entry(k), &expected);
    }

    #[test]
    fn nonfinite_predictions_name_the_entry() {
        let mut r = ModelReservoir::new(pv(&[1.0]));
        let err = r
            .init_new_model(&Matrix::zeros(2, 1), |_, b| {
                Ok(Matrix::from_vec(b.rows(), 1, vec![f64::NAN; b.rows()]).unwrap())
            })
            .unwrap_err();
        assert!(err.to_string().contains("entry 0"));
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn select_active_examples() {
        assert_eq!(select_active(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(select_active(&[0.5, 0.5]), 0);
        let mut r = rng::seeded(5, 0);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..16).map(|_| r.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let mut scan = 0;
            for k in 1..q.len() {
                if q[k] > q[scan] {
                    scan = k;
                }
            }
            assert_eq!(select_active(&q), scan);
        }
    }

    #[test]
    fn ensemble_examples() {
        let mut r = ModelReservoir::new(pv(&[1.0, -2.0, 3.0]));
        let k = r.init_from_source();
        r.write_active(k, pv(&[-1.0, 2.0, -3.0])).unwrap();
        assert_eq!(r.ensemble_params(&[0.0, 1.0]).unwrap(), *r.entry(1));
        assert_eq!(r.ensemble_params(&[0.5, 0.5]).unwrap(), pv(&[0.0, 0.0, 0.0]));
        assert!(r.ensemble_params(&[1.0]).is_err());
    }

    #[test]
    fn ensemble_matches_naive_accumulation() {
        let mut g = rng::seeded(6, 0);
        let mut r = ModelReservoir::new(pv(&(0..5).map(|_| g.random::<f64>()).collect::<Vec<_>>()));
        for _ in 0..3 {
            let k = r.init_from_source();
            r.write_active(k, pv(&(0..5).map(|_| g.random_range(-4.0..4.0)).collect::<Vec<_>>()))
                .unwrap();
        }
        let raw: Vec<f64> = (0..4).map(|_| g.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let got = r.ensemble_params(&q).unwrap();
        for i in 0..5 {
            let mut naive = 0.0;
            for k in 0..4 {
                naive += q[k] * r.entry(k).as_slice()[i];
            }
            assert!((got.as_slice()[i] - naive).abs() < 1e-12);
        }
        // prediction path leaves entries untouched
        let before = r.clone();
        let _ = r.ensemble_params(&q).unwrap();
        assert_eq!(before, r);
    }

    #[test]
    fn write_isolates_other_entries() {
        let mut r = ModelReservoir::new(pv(&[0.1, 0.2]));
        r.init_from_source();
        r.init_from_source();
        let before = r.clone();
        r.write_active(1, pv(&[7.0, 8.0])).unwrap();
        assert_eq!(r.entry(1), &pv(&[7.0, 8.0]));
        for k in [0, 2] {
            let a: Vec<u64> = r.entry(k).as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = before.entry(k).as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(r.write_active(3, pv(&[0.0, 0.0])).is_err());
        assert!(r.write_active(0, pv(&[0.0])).is_err());
    }

    #[test]
    fn interleaved_writes_match_replay() {
        let mut g = rng::seeded(7, 0);
        let mut r = ModelReservoir::new(pv(&[0.0; 4]));
        for _ in 0..4 {
            r.init_from_source();
        }
        let mut log = Vec::new();
        for _ in 0..200 {
            let k = g.random_range(0..5);
            let p = pv(&(0..4).map(|_| g.random::<f64>()).collect::<Vec<_>>());
            r.write_active(k, p.clone()).unwrap();
            log.push((k, p));
        }
        let mut replay = vec![vec![0.0; 4]; 5];
        for (k, p) in log {
            replay[k] = p.into_vec();
        }
        for k in 0..5 {
            assert_eq!(r.entry(k).as_slice(), &replay[k][..]);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let mut r = ModelReservoir::new(pv(&[1.5, -0.25]));
        let k = r.init_from_source();
        r.write_active(k, pv(&[f64::MIN_POSITIVE, 1e300])).unwrap();
        let mut buf = Vec::new();
        r.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RTTA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 3 * 2 * 8);
        assert_eq!(ModelReservoir::read_checkpoint(&buf[..]).unwrap(), r);
        buf[0] = b'X';
        assert!(ModelReservoir::read_checkpoint(&buf[..]).is_err());
    }
}
