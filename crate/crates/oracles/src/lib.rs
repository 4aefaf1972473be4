//! Slow, obviously-correct reference implementations.
//!
//! Nothing in here is shared with the `cytopair` library: every routine is a
//! direct transcription of the defining formula, evaluated in `f64` with
//! plain loops. The crate is only ever a dev-dependency, so production code
//! cannot reach it.

use std::collections::BTreeMap;
use std::fmt;

/// A value produced by a reference path together with the tolerance callers
/// are expected to compare at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult<V> {
    pub value: V,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    NonPositiveStep(f64),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::NonPositiveStep(h) => {
                write!(f, "finite-difference step must be > 0, got {h}")
            }
        }
    }
}

impl std::error::Error for OracleError {}

/// Symmetric InfoNCE evaluated straight from its definition: both directional
/// cross-entropies with the temperature multiplying the similarities, then
/// averaged. No log-sum-exp shift. Each term `-log(e^a / sum_j e^b_j)` is
/// written as `log(1 + sum_{j != k} e^(b_j - a))` so that near-zero losses
/// keep their relative precision.
pub fn oracle_infonce(s: &[Vec<f64>], tau: f64) -> OracleResult<f64> {
    let n = s.len();
    let mut image_to_profile = 0.0;
    for k in 0..n {
        let mut others = 0.0;
        for j in 0..n {
            if j != k {
                others += (tau * s[k][j] - tau * s[k][k]).exp();
            }
        }
        image_to_profile += others.ln_1p();
    }
    let mut profile_to_image = 0.0;
    for k in 0..n {
        let mut others = 0.0;
        for j in 0..n {
            if j != k {
                others += (tau * s[j][k] - tau * s[k][k]).exp();
            }
        }
        profile_to_image += others.ln_1p();
    }
    let nf = n as f64;
    OracleResult {
        value: 0.5 * (image_to_profile / nf + profile_to_image / nf),
        tolerance: 1e-9,
    }
}

/// Pairwise sigmoid loss, one logistic term per (i, j) pair, scaled by 1/n.
pub fn oracle_sigmoid(s: &[Vec<f64>], tau: f64, bias: f64) -> OracleResult<f64> {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let logit = tau * s[i][j] + bias;
            // -log sigmoid(z * logit)
            total += (-z * logit).exp().ln_1p();
        }
    }
    OracleResult {
        value: total / n as f64,
        tolerance: 1e-9,
    }
}

/// Central differences, one coordinate at a time.
pub fn finite_difference_grad<F>(f: F, params: &[f64], step: f64) -> Result<Vec<f64>, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(OracleError::NonPositiveStep(step));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Cosine similarity from the textbook formula.
pub fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePrediction {
    pub label: String,
    pub tally: BTreeMap<String, usize>,
    /// (distance, label, gallery index) of every pooled neighbor.
    pub neighbors: Vec<(f64, String, usize)>,
}

/// Exhaustive k-NN with vote pooling across query embeddings.
///
/// For each query embedding every gallery entry is scored and the whole list
/// sorted by (distance, gallery index); the first `k` are kept. Votes from all
/// query embeddings are pooled. Ties in the tally go to the class with the
/// smaller summed neighbor distance, then to the lexicographically smaller
/// label.
pub fn oracle_knn(
    gallery: &[(Vec<f32>, String)],
    queries: &[Vec<f32>],
    k: usize,
) -> OraclePrediction {
    let k = k.min(gallery.len());
    let mut pooled = Vec::new();
    for q in queries {
        let mut all: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(i, (e, _))| (1.0 - oracle_cosine(e, q), i))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(d, i) in all.iter().take(k) {
            pooled.push((d, gallery[i].1.clone(), i));
        }
    }
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    let mut dist_sum: BTreeMap<String, f64> = BTreeMap::new();
    for (d, label, _) in &pooled {
        *tally.entry(label.clone()).or_insert(0) += 1;
        *dist_sum.entry(label.clone()).or_insert(0.0) += d;
    }
    let mut best: Option<(&String, usize, f64)> = None;
    // BTreeMap iterates labels in lexicographic order, so a strict comparison
    // keeps the smallest label among exact ties.
    for (label, &count) in &tally {
        let sum = dist_sum[label];
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum < bs),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    OraclePrediction {
        label: best.map(|b| b.0.clone()).unwrap_or_default(),
        tally,
        neighbors: pooled,
    }
}

/// Linear interpolation of `values` onto `out_len` evenly spaced points that
/// include both endpoints.
pub fn oracle_resample_linear(values: &[f64], out_len: usize) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![values[0]; out_len];
    }
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = if out_len == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (out_len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        out.push(values[lo] * (1.0 - frac) + values[hi] * frac);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g =
            finite_difference_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_difference_grad(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_difference_grad(|x| x[0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn infonce_anchors() {
        assert_eq!(oracle_infonce(&[vec![0.3]], 5.0).value, 0.0);
        let c = vec![vec![0.25; 4]; 4];
        assert!((oracle_infonce(&c, 3.0).value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn knn_single_entry_and_global_majority() {
        let g = vec![(vec![1.0, 0.0], "a".to_string())];
        assert_eq!(oracle_knn(&g, &[vec![0.0, 1.0]], 3).label, "a");
        let g = vec![
            (vec![1.0, 0.0], "x".to_string()),
            (vec![0.0, 1.0], "y".to_string()),
            (vec![0.5, 0.5], "y".to_string()),
        ];
        assert_eq!(oracle_knn(&g, &[vec![1.0, 0.0]], 3).label, "y");
    }
}
