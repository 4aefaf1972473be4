//! Convolutions lowered to gemm through im2col. A 1-D convolution is the 2-D
//! case with unit height.

use super::float::Float;
use super::gemm::{gemm, Mat, MatMut};
use super::tape::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "convolution kernel larger than padded input"
        );
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho,
            wo,
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Writes this sample's patches into columns `off..off + col_cols()` of a
    /// column matrix with row stride `stride`.
    fn im2col<T: Float>(&self, x: &[T], col: &mut [T], stride: usize, off: usize) {
        let cols = self.col_cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * stride + off..row * stride + off + cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + ki) as isize - self.ph as isize;
                        let out_row = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let (lo, hi) = self.valid_ow(kj);
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            let first = lo * self.sw + kj - self.pw;
                            if self.sw == 1 {
                                out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                                    *o = src[first + i * self.sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kj` lies
    /// inside the image.
    fn valid_ow(&self, kj: usize) -> (usize, usize) {
        // iw = ow*sw + kj - pw must satisfy 0 <= iw < w
        let lo = if kj >= self.pw {
            0
        } else {
            (self.pw - kj).div_ceil(self.sw)
        };
        let hi = if self.w + self.pw > kj {
            ((self.w + self.pw - kj - 1) / self.sw + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn col2im_add<T: Float>(&self, col: &[T], stride: usize, off: usize, x: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * stride + off..row * stride + off + cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + ki) as isize - self.ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + ih as usize * self.w;
                        let (lo, hi) = self.valid_ow(kj);
                        if lo >= hi {
                            continue;
                        }
                        let first = base + lo * self.sw + kj - self.pw;
                        let srow = &src[oh * self.wo + lo..oh * self.wo + hi];
                        if self.sw == 1 {
                            for (d, &v) in x[first..first + hi - lo].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in srow.iter().enumerate() {
                                x[first + i * self.sw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'s, T: Float> Graph<'s, T> {
    /// `x: [N, C, L]`, `w: [O, C, K]` → `[N, O, L_out]`. No bias.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv1d input must be [N, C, L], got {xs:?}");
        assert_eq!(ws.len(), 3, "conv1d weight must be [O, C, K], got {ws:?}");
        let geo = Geometry::new(xs[1], 1, xs[2], 1, ws[2], (1, stride), (0, pad));
        let out_shape = [xs[0], ws[0], geo.wo];
        self.conv_impl(x, w, xs[0], ws[0], geo, &out_shape)
    }

    /// `x: [N, C, H, W]`, `w: [O, C, KH, KW]` → `[N, O, H_out, W_out]`. No bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(
            ws.len(),
            4,
            "conv2d weight must be [O, C, KH, KW], got {ws:?}"
        );
        let geo = Geometry::new(
            xs[1],
            xs[2],
            xs[3],
            ws[2],
            ws[3],
            (stride, stride),
            (pad, pad),
        );
        let out_shape = [xs[0], ws[0], geo.ho, geo.wo];
        self.conv_impl(x, w, xs[0], ws[0], geo, &out_shape)
    }

    /// All samples share one column matrix `[C·KH·KW, N·L_out]`, so each
    /// direction is a single large gemm.
    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        n: usize,
        o: usize,
        geo: Geometry,
        out_shape: &[usize],
    ) -> Var {
        assert_eq!(self.shape(w)[1], geo.c, "convolution channel mismatch");
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let wide = n * cols;
        let in_len = geo.c * geo.h * geo.w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut col = vec![T::zero(); rows * wide];
        for b in 0..n {
            geo.im2col(&xv[b * in_len..(b + 1) * in_len], &mut col, wide, b * cols);
        }
        let mut tmp = vec![T::zero(); o * wide];
        gemm(
            T::one(),
            Mat::new(wv, 0, o, rows),
            Mat::new(&col, 0, rows, wide),
            T::zero(),
            MatMut::new(&mut tmp, 0, o, wide),
        );
        // [O, N, L] -> [N, O, L]
        let mut out = vec![T::zero(); n * o * cols];
        for oc in 0..o {
            for b in 0..n {
                out[(b * o + oc) * cols..(b * o + oc + 1) * cols]
                    .copy_from_slice(&tmp[oc * wide + b * cols..oc * wide + (b + 1) * cols]);
            }
        }
        drop(tmp);
        let in_shape = self.shape(x).to_vec();
        let w_shape = self.shape(w).to_vec();
        self.push(
            Tensor::from_vec(out_shape, out),
            &[x, w],
            Box::new(move |args| {
                let gy = args.grad.data();
                let wv = args.inputs[1].data();
                let mut gyt = vec![T::zero(); o * wide];
                for oc in 0..o {
                    for b in 0..n {
                        gyt[oc * wide + b * cols..oc * wide + (b + 1) * cols]
                            .copy_from_slice(&gy[(b * o + oc) * cols..(b * o + oc + 1) * cols]);
                    }
                }
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![T::zero(); o * rows];
                    gemm(
                        T::one(),
                        Mat::new(&gyt, 0, o, wide),
                        Mat::new(&col, 0, rows, wide).t(),
                        T::zero(),
                        MatMut::new(&mut gw, 0, o, rows),
                    );
                    Tensor::from_vec(&w_shape, gw)
                });
                let gx = args.needs[0].then(|| {
                    let mut gcol = vec![T::zero(); rows * wide];
                    gemm(
                        T::one(),
                        Mat::new(wv, 0, o, rows).t(),
                        Mat::new(&gyt, 0, o, wide),
                        T::zero(),
                        MatMut::new(&mut gcol, 0, rows, wide),
                    );
                    let mut gx = vec![T::zero(); n * in_len];
                    for b in 0..n {
                        geo.col2im_add(
                            &gcol,
                            wide,
                            b * cols,
                            &mut gx[b * in_len..(b + 1) * in_len],
                        );
                    }
                    Tensor::from_vec(&in_shape, gx)
                });
                vec![gx, gw]
            }),
        )
    }
}
