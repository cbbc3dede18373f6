//! Softmax, Shannon entropy and the mutual-information objective shared by
//! style clustering and model-reservoir initialization.

use crate::matrix::Matrix;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `p ln p` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// Column means of a row-stochastic matrix.
pub fn marginal(q: &Matrix) -> Vec<f64> {
    let mut bar = vec![0.0; q.cols()];
    for row in q.iter_rows() {
        for (b, &v) in bar.iter_mut().zip(row) {
            *b += v;
        }
    }
    let n = q.rows().max(1) as f64;
    bar.iter_mut().for_each(|b| *b /= n);
    bar
}

/// Conditional-entropy plus negative marginal-entropy: mean row entropy
/// minus the entropy of the column marginal. Lies in `[-ln K, ln K]`.
pub fn mi_loss(q: &Matrix) -> f64 {
    if q.rows() == 0 {
        return 0.0;
    }
    let cond = q.iter_rows().map(entropy).sum::<f64>() / q.rows() as f64;
    let bar = marginal(q);
    cond - entropy(&bar)
}
