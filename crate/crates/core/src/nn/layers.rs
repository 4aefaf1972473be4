//! Parameterized building blocks. Each constructor registers its tensors in a
//! [`ParamStore`] under a dotted name and returns the ids.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::float::Float;
use super::norm::BatchNormParams;
use super::params::{ParamId, ParamKind, ParamStore};
use super::tape::{Graph, Var};
use super::tensor::Tensor;

const WEIGHT: ParamKind = ParamKind::Weight { decay: true };

pub(crate) fn uniform<T: Float, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

pub(crate) fn normal<T: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_features, in_features], bound),
            WEIGHT,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform(rng, &[out_features], bound),
                WEIGHT,
            )
        });
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub two_d: bool,
}

impl Conv {
    /// 1-D convolution without bias; He-normal initialization.
    pub fn new_1d<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_ch * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_ch, in_ch, kernel], std),
            WEIGHT,
        );
        Conv {
            weight,
            stride,
            pad,
            two_d: false,
        }
    }

    /// 2-D convolution without bias with a square kernel.
    pub fn new_2d<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_ch, in_ch, kernel, kernel], std),
            WEIGHT,
        );
        Conv {
            weight,
            stride,
            pad,
            two_d: true,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        if self.two_d {
            g.conv2d(x, w, self.stride, self.pad)
        } else {
            g.conv1d(x, w, self.stride, self.pad)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm(pub BatchNormParams);

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm(BatchNormParams {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels], T::one()),
                WEIGHT,
            ),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), WEIGHT),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.batch_norm(x, &self.0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[dim], T::one()),
                WEIGHT,
            ),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), WEIGHT),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Two 3-wide convolutions with batch norm and an identity or projected
/// shortcut, as in ResNet-18.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        two_d: bool,
    ) -> Self {
        let make = |store: &mut ParamStore<T>, rng: &mut R, n: &str, i, o, k, s, p| {
            if two_d {
                Conv::new_2d(store, rng, n, i, o, k, s, p)
            } else {
                Conv::new_1d(store, rng, n, i, o, k, s, p)
            }
        };
        let conv1 = make(
            store,
            rng,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
        );
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = make(
            store,
            rng,
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
        );
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                make(
                    store,
                    rng,
                    &format!("{name}.downsample.conv"),
                    in_ch,
                    out_ch,
                    1,
                    stride,
                    0,
                ),
                BatchNorm::new(store, &format!("{name}.downsample.bn"), out_ch),
            )
        });
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.bn1.forward(g, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = self.bn2.forward(g, h);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x);
                bn.forward(g, s)
            }
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

/// Pre-norm transformer encoder layer with GELU feedforward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    head_dim: usize,
    dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Self {
        let inner = heads * head_dim;
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(
                store,
                rng,
                &format!("{name}.attn.qkv"),
                dim,
                3 * inner,
                true,
            ),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), inner, dim, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff.fc1"), dim, ff_dim, true),
            ff2: Linear::new(store, rng, &format!("{name}.ff.fc2"), ff_dim, dim, true),
            heads,
            head_dim,
            dropout,
        }
    }

    /// `x: [N, L, D] -> [N, L, D]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let a = g.self_attention(qkv, self.heads, self.head_dim);
        let a = self.proj.forward(g, a);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.ff2.forward(g, h);
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}
