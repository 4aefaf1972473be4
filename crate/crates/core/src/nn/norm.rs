use super::float::Float;
use super::params::ParamId;
use super::tape::{Graph, Mode, Var};
use super::tensor::Tensor;

/// Stored tensors of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl<'s, T: Float> Graph<'s, T> {
    /// Batch normalization over `[N, C, ...]`. Train mode normalizes with the
    /// batch statistics and records updated running statistics; eval mode uses
    /// the stored running statistics.
    pub fn batch_norm(&mut self, x: Var, p: &BatchNormParams) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        let xv = self.value(x).data();

        let (mean, var) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = &xv[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                        mean[ch] += s.iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let s = &xv[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                        var[ch] += s.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            Mode::Eval => (
                self.store()
                    .get(p.running_mean)
                    .data()
                    .iter()
                    .map(|v| v.f64())
                    .collect(),
                self.store()
                    .get(p.running_var)
                    .data()
                    .iter()
                    .map(|v| v.f64())
                    .collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
                let (m, is) = (mean[ch], inv_std[ch]);
                for i in range {
                    let h = T::of((xv[i].f64() - m) * is);
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }

        let train = self.mode() == Mode::Train;
        if train {
            let mom = p.momentum;
            let unbias = if count > 1 {
                count as f64 / (count as f64 - 1.0)
            } else {
                1.0
            };
            let rm: Vec<T> = self
                .store()
                .get(p.running_mean)
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, m)| T::of((1.0 - mom) * r.f64() + mom * m))
                .collect();
            let rv: Vec<T> = self
                .store()
                .get(p.running_var)
                .data()
                .iter()
                .zip(&var)
                .map(|(r, v)| T::of((1.0 - mom) * r.f64() + mom * v * unbias))
                .collect();
            self.record_buffer_update(p.running_mean, Tensor::from_vec(&[c], rm));
            self.record_buffer_update(p.running_var, Tensor::from_vec(&[c], rv));
        }

        self.push(
            Tensor::from_vec(&shape, out),
            &[x, gamma, beta],
            Box::new(move |args| {
                let gy = args.grad.data();
                let gv = args.inputs[1].data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
                        for i in range {
                            sum_g[ch] += gy[i].f64();
                            sum_gx[ch] += gy[i].f64() * xhat[i].f64();
                        }
                    }
                }
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![T::zero(); gy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let range = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
                            let g = gv[ch].f64();
                            let is = inv_std[ch];
                            if train {
                                let mg = sum_g[ch] / count as f64;
                                let mgx = sum_gx[ch] / count as f64;
                                for i in range {
                                    gx[i] =
                                        T::of(g * is * (gy[i].f64() - mg - xhat[i].f64() * mgx));
                                }
                            } else {
                                for i in range {
                                    gx[i] = T::of(g * is * gy[i].f64());
                                }
                            }
                        }
                    }
                    Tensor::from_vec(&shape, gx)
                });
                let ggamma = Tensor::from_vec(&[c], sum_gx.iter().map(|&v| T::of(v)).collect());
                let gbeta = Tensor::from_vec(&[c], sum_g.iter().map(|&v| T::of(v)).collect());
                vec![gx, Some(ggamma), Some(gbeta)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = T::of((row[j].f64() - mean) * is);
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        self.push(
            Tensor::from_vec(&shape, out),
            &[x, gamma, beta],
            Box::new(move |args| {
                let gy = args.grad.data();
                let gv = args.inputs[1].data();
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = vec![T::zero(); gy.len()];
                for r in 0..rows {
                    let mut mean_dh = 0.0f64;
                    let mut mean_dh_h = 0.0f64;
                    for j in 0..d {
                        let i = r * d + j;
                        ggamma[j] += gy[i] * xhat[i];
                        gbeta[j] += gy[i];
                        let dh = gy[i].f64() * gv[j].f64();
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i].f64();
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gy[i].f64() * gv[j].f64();
                        gx[i] = T::of(inv_std[r] * (dh - mean_dh - xhat[i].f64() * mean_dh_h));
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, gx)),
                    Some(Tensor::from_vec(&[d], ggamma)),
                    Some(Tensor::from_vec(&[d], gbeta)),
                ]
            }),
        )
    }
}
