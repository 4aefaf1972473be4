use super::float::Float;
use super::gemm::{gemm, Mat, MatMut};
use super::tape::{Graph, Var};
use super::tensor::Tensor;

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'s, T: Float> Graph<'s, T> {
    /// One LSTM direction over a whole sequence, returning the final hidden
    /// state `[N, H]`.
    ///
    /// `xproj: [N, T, 4H]` is the input projection (bias included) laid out as
    /// gates `[i | f | g | o]`; `w_hh: [4H, H]` is the recurrent weight. With
    /// `reverse` the sequence is consumed from the last step to the first.
    /// The initial hidden and cell states are zero.
    pub fn lstm(&mut self, xproj: Var, w_hh: Var, reverse: bool) -> Var {
        let xs = self.shape(xproj).to_vec();
        let (n, steps, g4) = (xs[0], xs[1], xs[2]);
        let hid = g4 / 4;
        assert_eq!(self.shape(w_hh), &[g4, hid], "lstm: recurrent weight shape");
        assert!(steps >= 1, "lstm: empty sequence");
        let xv = self.value(xproj).data();
        let wv = self.value(w_hh).data();

        // hs[s] / cs[s]: state before processing step s; index `steps` is final.
        let mut hs = vec![T::zero(); (steps + 1) * n * hid];
        let mut cs = vec![T::zero(); (steps + 1) * n * hid];
        let mut acts = vec![T::zero(); steps * n * g4];
        let mut z = vec![T::zero(); n * g4];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            for b in 0..n {
                let src = &xv[(b * steps + t) * g4..(b * steps + t + 1) * g4];
                z[b * g4..(b + 1) * g4].copy_from_slice(src);
            }
            gemm(
                T::one(),
                Mat::new(&hs, s * n * hid, n, hid),
                Mat::new(wv, 0, g4, hid).t(),
                T::one(),
                MatMut::new(&mut z, 0, n, g4),
            );
            let (prev, next) = cs.split_at_mut((s + 1) * n * hid);
            let c_prev = &prev[s * n * hid..];
            let c_next = &mut next[..n * hid];
            let act = &mut acts[s * n * g4..(s + 1) * n * g4];
            let h_next = &mut hs[(s + 1) * n * hid..(s + 2) * n * hid];
            for b in 0..n {
                for j in 0..hid {
                    let zi = z[b * g4 + j];
                    let zf = z[b * g4 + hid + j];
                    let zg = z[b * g4 + 2 * hid + j];
                    let zo = z[b * g4 + 3 * hid + j];
                    let (i, f, g, o) = (sigmoid(zi), sigmoid(zf), zg.tanh(), sigmoid(zo));
                    act[b * g4 + j] = i;
                    act[b * g4 + hid + j] = f;
                    act[b * g4 + 2 * hid + j] = g;
                    act[b * g4 + 3 * hid + j] = o;
                    let c = f * c_prev[b * hid + j] + i * g;
                    c_next[b * hid + j] = c;
                    h_next[b * hid + j] = o * c.tanh();
                }
            }
        }
        let out = hs[steps * n * hid..].to_vec();
        self.push(
            Tensor::from_vec(&[n, hid], out),
            &[xproj, w_hh],
            Box::new(move |args| {
                let wv = args.inputs[1].data();
                let mut dh = args.grad.data().to_vec();
                let mut dc = vec![T::zero(); n * hid];
                let mut dx = vec![T::zero(); n * steps * g4];
                let mut dw = vec![T::zero(); g4 * hid];
                let one = T::one();
                for s in (0..steps).rev() {
                    let t = if reverse { steps - 1 - s } else { s };
                    let act = &acts[s * n * g4..(s + 1) * n * g4];
                    let c_prev = &cs[s * n * hid..(s + 1) * n * hid];
                    let c_now = &cs[(s + 1) * n * hid..(s + 2) * n * hid];
                    for b in 0..n {
                        let base = (b * steps + t) * g4;
                        for j in 0..hid {
                            let (i, f, g, o) = (
                                act[b * g4 + j],
                                act[b * g4 + hid + j],
                                act[b * g4 + 2 * hid + j],
                                act[b * g4 + 3 * hid + j],
                            );
                            let tc = c_now[b * hid + j].tanh();
                            let dhv = dh[b * hid + j];
                            let dcv = dc[b * hid + j] + dhv * o * (one - tc * tc);
                            dx[base + j] = dcv * g * i * (one - i);
                            dx[base + hid + j] = dcv * c_prev[b * hid + j] * f * (one - f);
                            dx[base + 2 * hid + j] = dcv * i * (one - g * g);
                            dx[base + 3 * hid + j] = dhv * tc * o * (one - o);
                            dc[b * hid + j] = dcv * f;
                        }
                    }
                    let dz = Mat::strided(&dx, t * g4, n, g4, steps * g4, 1);
                    gemm(
                        one,
                        dz.t(),
                        Mat::new(&hs, s * n * hid, n, hid),
                        one,
                        MatMut::new(&mut dw, 0, g4, hid),
                    );
                    gemm(
                        one,
                        dz,
                        Mat::new(wv, 0, g4, hid),
                        T::zero(),
                        MatMut::new(&mut dh, 0, n, hid),
                    );
                }
                vec![
                    Some(Tensor::from_vec(&[n, steps, g4], dx)),
                    Some(Tensor::from_vec(&[g4, hid], dw)),
                ]
            }),
        )
    }
}
