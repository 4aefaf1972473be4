//! Cosine similarity and the two contrastive objectives.
//!
//! The temperature multiplies the similarities: logits are `tau * S`, not
//! `S / tau`. `tau` is learned as `log_tau`.

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingVector;
use crate::error::{Error, Result};
use crate::nn::{Float, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Infonce,
    Sigmoid,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::Infonce),
            "sigmoid" => Ok(LossKind::Sigmoid),
            _ => Err(Error::InvalidInput(format!(
                "unknown loss `{s}` (infonce, sigmoid)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Infonce => "infonce",
            LossKind::Sigmoid => "sigmoid",
        })
    }
}

/// Row-major similarities; rows are image embeddings, columns profile
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(SimilarityMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged similarity rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `S[i][j] = cos(images[i], profiles[j])`.
    pub fn from_embeddings(
        images: &[EmbeddingVector],
        profiles: &[EmbeddingVector],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * profiles.len());
        for a in images {
            for b in profiles {
                data.push(cosine_similarity(a, b)?);
            }
        }
        Self::new(images.len(), profiles.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn square(&self) -> Result<usize> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "contrastive loss needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.rows == 0 {
            return Err(Error::Shape(
                "contrastive loss needs at least one pair".into(),
            ));
        }
        Ok(self.rows)
    }
}

pub fn cosine_similarity_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine similarity of {}- and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector(
            "cosine similarity with a zero vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_similarity_slices(&a.values, &b.values)
}

/// Loss value with gradients with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Row-major, same layout as the similarity matrix.
    pub d_s: Vec<f64>,
    pub d_tau: f64,
    pub d_bias: f64,
}

impl LossGrad {
    /// Gradient with respect to `log_tau`.
    pub fn d_log_tau(&self, tau: f64) -> f64 {
        self.d_tau * tau
    }
}

/// Cross-entropy of `values[target]` under a softmax over `values`, returned
/// with the log-sum-exp. The largest term is kept out of the sum so that a
/// near-certain target keeps its relative precision.
fn cross_entropy(values: &[f64], target: usize) -> (f64, f64) {
    let (top, max) =
        values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
    let rest: f64 = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - max).exp())
        .sum();
    let tail = rest.ln_1p();
    ((max - values[target]) + tail, max + tail)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn infonce_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    infonce_loss_grad(s, tau).map(|g| g.loss)
}

/// Symmetric InfoNCE: the mean of the image-to-profile (rows as anchors) and
/// profile-to-image (columns as anchors) cross-entropies.
pub fn infonce_loss_grad(s: &SimilarityMatrix, tau: f64) -> Result<LossGrad> {
    let n = s.square()?;
    let logit = |i: usize, j: usize| tau * s.get(i, j);
    let inv_n = 1.0 / n as f64;
    let mut d_logits = vec![0.0; n * n];
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    for k in 0..n {
        let row: Vec<f64> = (0..n).map(|j| logit(k, j)).collect();
        let col: Vec<f64> = (0..n).map(|i| logit(i, k)).collect();
        let (ce_r, lse_r) = cross_entropy(&row, k);
        let (ce_c, lse_c) = cross_entropy(&col, k);
        row_loss += ce_r;
        col_loss += ce_c;
        for j in 0..n {
            d_logits[k * n + j] += 0.5 * inv_n * (logit(k, j) - lse_r).exp();
            d_logits[j * n + k] += 0.5 * inv_n * (logit(j, k) - lse_c).exp();
        }
        d_logits[k * n + k] -= inv_n;
    }
    let loss = 0.5 * inv_n * (row_loss + col_loss);
    let d_tau = d_logits.iter().zip(s.data()).map(|(d, v)| d * v).sum();
    let d_s = d_logits.iter().map(|d| d * tau).collect();
    Ok(LossGrad {
        loss,
        d_s,
        d_tau,
        d_bias: 0.0,
    })
}

pub fn sigmoid_loss(s: &SimilarityMatrix, tau: f64, bias: f64) -> Result<f64> {
    sigmoid_loss_grad(s, tau, bias).map(|g| g.loss)
}

/// Pairwise sigmoid loss summed over all `n²` pairs and divided by `n`;
/// diagonal pairs are positives.
pub fn sigmoid_loss_grad(s: &SimilarityMatrix, tau: f64, bias: f64) -> Result<LossGrad> {
    let n = s.square()?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let x = tau * s.get(i, j) + bias;
            loss += softplus(-z * x);
            d_logits[i * n + j] = -z * sigmoid(-z * x) * inv_n;
        }
    }
    let d_tau = d_logits.iter().zip(s.data()).map(|(d, v)| d * v).sum();
    let d_bias = d_logits.iter().sum();
    let d_s = d_logits.iter().map(|d| d * tau).collect();
    Ok(LossGrad {
        loss: loss * inv_n,
        d_s,
        d_tau,
        d_bias,
    })
}

pub fn loss_grad(kind: LossKind, s: &SimilarityMatrix, tau: f64, bias: f64) -> Result<LossGrad> {
    match kind {
        LossKind::Infonce => infonce_loss_grad(s, tau),
        LossKind::Sigmoid => sigmoid_loss_grad(s, tau, bias),
    }
}

impl<'s, T: Float> Graph<'s, T> {
    /// Scalar contrastive loss of a square similarity matrix `s: [n, n]` with
    /// scalar `log_tau` and `bias` inputs.
    pub fn contrastive_loss(
        &mut self,
        kind: LossKind,
        s: Var,
        log_tau: Var,
        bias: Var,
    ) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "similarity matrix must be 2-D, got {shape:?}"
            )));
        }
        let sm = SimilarityMatrix::new(
            shape[0],
            shape[1],
            self.value(s).data().iter().map(|v| v.f64()).collect(),
        )?;
        let tau = self.value(log_tau).item().f64().exp();
        let b = self.value(bias).item().f64();
        let grad = loss_grad(kind, &sm, tau, b)?;
        let loss = grad.loss;
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            &[s, log_tau, bias],
            Box::new(move |args| {
                let g = args.grad.item().f64();
                let d_s = grad.d_s.iter().map(|v| T::of(v * g)).collect();
                vec![
                    Some(Tensor::from_vec(&shape, d_s)),
                    Some(Tensor::scalar(T::of(grad.d_log_tau(tau) * g))),
                    Some(Tensor::scalar(T::of(grad.d_bias * g))),
                ]
            }),
        ))
    }
}
