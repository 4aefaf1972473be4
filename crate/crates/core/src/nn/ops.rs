//! Elementwise, shape and dense-layer operations.

use rand::Rng;

use super::float::Float;
use super::gemm::{gemm, Mat, MatMut};
use super::tape::{Graph, Mode, Var};
use super::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Returned when a row that must be normalized has zero length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroNormRow(pub usize);

impl<'s, T: Float> Graph<'s, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    /// `x + y` where `y`'s shape equals a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        assert!(
            ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == ys[..],
            "add_broadcast: {ys:?} is not a suffix of {xs:?}"
        );
        let inner = self.value(y).len();
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &b) in chunk.iter_mut().zip(yv) {
                *o += b;
            }
        }
        self.push(
            out,
            &[x, y],
            Box::new(move |args| {
                let gy = if args.needs[1] {
                    let mut acc = vec![T::zero(); inner];
                    for chunk in args.grad.data().chunks(inner) {
                        for (a, &g) in acc.iter_mut().zip(chunk) {
                            *a += g;
                        }
                    }
                    Some(Tensor::from_vec(&ys, acc))
                } else {
                    None
                };
                vec![Some(args.grad.clone()), gy]
            }),
        )
    }

    /// Adds a per-channel bias to `x` of shape `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        assert_eq!(self.shape(bias), &[c], "channel bias shape");
        let spatial: usize = shape[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(
            out,
            &[x, bias],
            Box::new(move |args| {
                let gb = args.needs[1].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (i, chunk) in args.grad.data().chunks(spatial).enumerate() {
                        acc[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec(&[c], acc)
                });
                vec![Some(args.grad.clone()), gb]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = args.grad.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= c);
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        self.record_kink(x);
        self.push(
            out,
            &[x],
            Box::new(|args| {
                let mut g = args.grad.clone();
                for (gv, &o) in g.data_mut().iter_mut().zip(args.out.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let one = T::one();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            let x = *v;
            *v = half * x * (one + (c * (x + a * x * x * x)).tanh());
        });
        self.push(
            out,
            &[x],
            Box::new(move |args| {
                let three = T::of(3.0);
                let mut g = args.grad.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(args.inputs[0].data()) {
                    let t = (c * (x + a * x * x * x)).tanh();
                    let d =
                        half * (one + t) + half * x * (one - t * t) * c * (one + three * a * x * x);
                    *gv *= d;
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(
            out,
            &[x],
            Box::new(|args| {
                let mut g = args.grad.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(args.out.data()) {
                    *gv *= T::one() - y * y;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode() == Mode::Eval || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = {
            let rng = self.rng();
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = args.grad.clone();
                for (gv, &m) in g.data_mut().iter_mut().zip(&mask) {
                    *gv *= m;
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshaped(shape);
        self.push(
            out,
            &[x],
            Box::new(move |args| vec![Some(args.grad.clone().reshaped(&in_shape))]),
        )
    }

    /// `x · wᵀ + b` over the last axis. `x: [.., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (out_f, in_f) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(
            *xs.last().unwrap(),
            in_f,
            "linear: input features {xs:?} vs weight {out_f}x{in_f}"
        );
        let rows = self.value(x).len() / in_f;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[out_f]);
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            T::one(),
            Mat::new(self.value(x).data(), 0, rows, in_f),
            Mat::new(self.value(w).data(), 0, out_f, in_f).t(),
            if b.is_some() { T::one() } else { T::zero() },
            MatMut::new(&mut out, 0, rows, out_f),
        );
        let inputs: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            Tensor::from_vec(&out_shape, out),
            &inputs,
            Box::new(move |args| {
                let gy = args.grad.data();
                let xv = args.inputs[0];
                let wv = args.inputs[1];
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * in_f];
                    gemm(
                        T::one(),
                        Mat::new(gy, 0, rows, out_f),
                        Mat::new(wv.data(), 0, out_f, in_f),
                        T::zero(),
                        MatMut::new(&mut gx, 0, rows, in_f),
                    );
                    Tensor::from_vec(xv.shape(), gx)
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![T::zero(); out_f * in_f];
                    gemm(
                        T::one(),
                        Mat::new(gy, 0, rows, out_f).t(),
                        Mat::new(xv.data(), 0, rows, in_f),
                        T::zero(),
                        MatMut::new(&mut gw, 0, out_f, in_f),
                    );
                    Tensor::from_vec(&[out_f, in_f], gw)
                });
                let mut res = vec![gx, gw];
                if args.inputs.len() == 3 {
                    let gb = args.needs[2].then(|| {
                        let mut gb = vec![T::zero(); out_f];
                        for row in gy.chunks(out_f) {
                            for (a, &g) in gb.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        Tensor::from_vec(&[out_f], gb)
                    });
                    res.push(gb);
                }
                res
            }),
        )
    }

    /// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, k2) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul_nt inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            Mat::new(self.value(a).data(), 0, m, k),
            Mat::new(self.value(b).data(), 0, n, k).t(),
            T::zero(),
            MatMut::new(&mut out, 0, m, n),
        );
        self.push(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        Mat::new(g, 0, m, n),
                        Mat::new(args.inputs[1].data(), 0, n, k),
                        T::zero(),
                        MatMut::new(&mut ga, 0, m, k),
                    );
                    Tensor::from_vec(&[m, k], ga)
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![T::zero(); n * k];
                    gemm(
                        T::one(),
                        Mat::new(g, 0, m, n).t(),
                        Mat::new(args.inputs[0].data(), 0, m, k),
                        T::zero(),
                        MatMut::new(&mut gb, 0, n, k),
                    );
                    Tensor::from_vec(&[n, k], gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let inv = T::of(1.0 / spatial as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::from_vec(&[n, c], out),
            &[x],
            Box::new(move |args| {
                let mut g = Vec::with_capacity(n * c * spatial);
                for &gv in args.grad.data() {
                    g.extend(std::iter::repeat_n(gv * inv, spatial));
                }
                vec![Some(Tensor::from_vec(&shape, g))]
            }),
        )
    }

    /// Mean over the token axis: `[N, L, D] -> [N, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let inv = T::of(1.0 / l as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            for t in 0..l {
                let row = &xv[(b * l + t) * d..(b * l + t + 1) * d];
                for (o, &v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(
            Tensor::from_vec(&[n, d], out),
            &[x],
            Box::new(move |args| {
                let gy = args.grad.data();
                let mut g = vec![T::zero(); n * l * d];
                for b in 0..n {
                    for t in 0..l {
                        for j in 0..d {
                            g[(b * l + t) * d + j] = gy[b * d + j] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, g))]
            }),
        )
    }

    /// Picks one token: `[N, L, D] -> [N, D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        assert!(index < l);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * l + index) * d..(b * l + index + 1) * d]);
        }
        self.push(
            Tensor::from_vec(&[n, d], out),
            &[x],
            Box::new(move |args| {
                let gy = args.grad.data();
                let mut g = vec![T::zero(); n * l * d];
                for b in 0..n {
                    g[(b * l + index) * d..(b * l + index + 1) * d]
                        .copy_from_slice(&gy[b * d..(b + 1) * d]);
                }
                vec![Some(Tensor::from_vec(&shape, g))]
            }),
        )
    }

    /// Appends a constant column: `[N, F] -> [N, F + 1]`. The column receives
    /// no gradient and is copied through unchanged.
    pub fn append_column(&mut self, x: Var, column: &[T]) -> Var {
        let (n, f) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(column.len(), n, "append_column: one value per row");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * (f + 1));
        for (row, &c) in xv.chunks(f).zip(column) {
            out.extend_from_slice(row);
            out.push(c);
        }
        self.push(
            Tensor::from_vec(&[n, f + 1], out),
            &[x],
            Box::new(move |args| {
                let mut g = Vec::with_capacity(n * f);
                for row in args.grad.data().chunks(f + 1) {
                    g.extend_from_slice(&row[..f]);
                }
                vec![Some(Tensor::from_vec(&[n, f], g))]
            }),
        )
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, fa) = (self.shape(a)[0], self.shape(a)[1]);
        let (n2, fb) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(n, n2, "concat_cols: row mismatch");
        let mut out = Vec::with_capacity(n * (fa + fb));
        for r in 0..n {
            out.extend_from_slice(&self.value(a).data()[r * fa..(r + 1) * fa]);
            out.extend_from_slice(&self.value(b).data()[r * fb..(r + 1) * fb]);
        }
        self.push(
            Tensor::from_vec(&[n, fa + fb], out),
            &[a, b],
            Box::new(move |args| {
                let mut ga = Vec::with_capacity(n * fa);
                let mut gb = Vec::with_capacity(n * fb);
                for row in args.grad.data().chunks(fa + fb) {
                    ga.extend_from_slice(&row[..fa]);
                    gb.extend_from_slice(&row[fa..]);
                }
                vec![
                    Some(Tensor::from_vec(&[n, fa], ga)),
                    Some(Tensor::from_vec(&[n, fb], gb)),
                ]
            }),
        )
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, a, b) = (shape[0], shape[1], shape[2]);
        let out = transpose_batched(self.value(x).data(), n, a, b);
        self.push(
            Tensor::from_vec(&[n, b, a], out),
            &[x],
            Box::new(move |args| {
                vec![Some(Tensor::from_vec(
                    &shape,
                    transpose_batched(args.grad.data(), n, b, a),
                ))]
            }),
        )
    }

    /// Scales each row of `[N, D]` to unit Euclidean length. Norms are
    /// accumulated in `f64`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, ZeroNormRow> {
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for (r, row) in xv.chunks(d).enumerate() {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(ZeroNormRow(r));
            }
            out.extend(row.iter().map(|v| T::of(v.f64() / norm)));
            norms.push(norm);
        }
        Ok(self.push(
            Tensor::from_vec(&[n, d], out),
            &[x],
            Box::new(move |args| {
                let y = args.out.data();
                let gy = args.grad.data();
                let mut g = Vec::with_capacity(n * d);
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    let inv = 1.0 / norms[r];
                    g.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| T::of((gv.f64() - yv.f64() * dot) * inv)),
                    );
                }
                vec![Some(Tensor::from_vec(&[n, d], g))]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| vec![Some(Tensor::full(&shape, args.grad.item()))]),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            &[a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let ga = args.needs[0].then(|| {
                    Tensor::from_vec(
                        &shape,
                        g.iter()
                            .zip(args.inputs[1].data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    )
                });
                let gb = args.needs[1].then(|| {
                    Tensor::from_vec(
                        &shape,
                        g.iter()
                            .zip(args.inputs[0].data())
                            .map(|(&g, &x)| g * x)
                            .collect(),
                    )
                });
                vec![ga, gb]
            }),
        )
    }
}

pub(crate) fn transpose_batched<T: Float>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * a * b];
    for s in 0..n {
        let base = s * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = x[base + i * b + j];
            }
        }
    }
    out
}
