use super::float::Float;
use super::gemm::{gemm, Mat, MatMut};
use super::tape::{Graph, Var};
use super::tensor::Tensor;

impl<'s, T: Float> Graph<'s, T> {
    /// Scaled dot-product self-attention over packed projections.
    ///
    /// `qkv: [N, L, 3·H·dh]` holds queries, keys and values side by side; the
    /// result `[N, L, H·dh]` concatenates the heads. Attention probabilities
    /// are kept for the backward pass.
    pub fn self_attention(&mut self, qkv: Var, heads: usize, head_dim: usize) -> Var {
        let shape = self.shape(qkv).to_vec();
        let (n, l) = (shape[0], shape[1]);
        let e = heads * head_dim;
        assert_eq!(
            shape[2],
            3 * e,
            "self_attention: expected last dim {} got {}",
            3 * e,
            shape[2]
        );
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let xv = self.value(qkv).data();
        let mut probs = vec![T::zero(); n * heads * l * l];
        let mut out = vec![T::zero(); n * l * e];
        for b in 0..n {
            for h in 0..heads {
                let q_off = b * l * 3 * e + h * head_dim;
                let p_off = (b * heads + h) * l * l;
                gemm(
                    scale,
                    Mat::strided(xv, q_off, l, head_dim, 3 * e, 1),
                    Mat::strided(xv, q_off + e, l, head_dim, 3 * e, 1).t(),
                    T::zero(),
                    MatMut::new(&mut probs, p_off, l, l),
                );
                for row in probs[p_off..p_off + l * l].chunks_mut(l) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    Mat::new(&probs, p_off, l, l),
                    Mat::strided(xv, q_off + 2 * e, l, head_dim, 3 * e, 1),
                    T::zero(),
                    MatMut::strided(&mut out, b * l * e + h * head_dim, l, head_dim, e, 1),
                );
            }
        }
        self.push(
            Tensor::from_vec(&[n, l, e], out),
            &[qkv],
            Box::new(move |args| {
                let gy = args.grad.data();
                let xv = args.inputs[0].data();
                let mut gx = vec![T::zero(); n * l * 3 * e];
                let mut dp = vec![T::zero(); l * l];
                for b in 0..n {
                    for h in 0..heads {
                        let q_off = b * l * 3 * e + h * head_dim;
                        let o_off = b * l * e + h * head_dim;
                        let p_off = (b * heads + h) * l * l;
                        let p = Mat::new(&probs, p_off, l, l);
                        let d_out = Mat::strided(gy, o_off, l, head_dim, e, 1);
                        // dV = Pᵀ dO
                        gemm(
                            T::one(),
                            p.t(),
                            d_out,
                            T::zero(),
                            MatMut::strided(&mut gx, q_off + 2 * e, l, head_dim, 3 * e, 1),
                        );
                        // dP = dO Vᵀ
                        gemm(
                            T::one(),
                            d_out,
                            Mat::strided(xv, q_off + 2 * e, l, head_dim, 3 * e, 1).t(),
                            T::zero(),
                            MatMut::new(&mut dp, 0, l, l),
                        );
                        // softmax backward, in place on dp
                        for i in 0..l {
                            let prow = &probs[p_off + i * l..p_off + (i + 1) * l];
                            let drow = &mut dp[i * l..(i + 1) * l];
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot);
                            }
                        }
                        // dQ = scale · dS K ; dK = scale · dSᵀ Q
                        gemm(
                            scale,
                            Mat::new(&dp, 0, l, l),
                            Mat::strided(xv, q_off + e, l, head_dim, 3 * e, 1),
                            T::zero(),
                            MatMut::strided(&mut gx, q_off, l, head_dim, 3 * e, 1),
                        );
                        gemm(
                            scale,
                            Mat::new(&dp, 0, l, l).t(),
                            Mat::strided(xv, q_off, l, head_dim, 3 * e, 1),
                            T::zero(),
                            MatMut::strided(&mut gx, q_off + e, l, head_dim, 3 * e, 1),
                        );
                    }
                }
                vec![Some(Tensor::from_vec(&[n, l, 3 * e], gx))]
            }),
        )
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
