//! Bounds-checked strided views over flat buffers and a gemm on top of them.

use super::float::Float;

#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Float> Mat<'a, T> {
    /// Row-major `rows × cols` matrix starting at `off`.
    pub fn new(data: &'a [T], off: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, off, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [T],
        off: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        let m = Mat {
            data,
            off,
            rows,
            cols,
            rs,
            cs,
        };
        if rows > 0 && cols > 0 {
            assert!(m.last_index() < data.len(), "matrix view out of bounds");
        }
        m
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

pub struct MatMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Float> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], off: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, off, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [T],
        off: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                off + (rows - 1) * rs + (cols - 1) * cs < data.len(),
                "matrix view out of bounds"
            );
        }
        MatMut {
            data,
            off,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the previous contents of
/// `c` are ignored.
pub fn gemm<T: Float>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm row mismatch");
    assert_eq!(b.cols, c.cols, "gemm column mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.off + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked at construction and the
    // shapes agree, so every index gemm touches is inside its slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            Mat::new(&a, 0, 2, 3),
            Mat::new(&b, 0, 3, 4),
            0.0,
            MatMut::new(&mut c, 0, 2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (b^T a^T) = (a b)^T
        let mut ct = vec![0.0; 8];
        gemm(
            1.0,
            Mat::new(&b, 0, 3, 4).t(),
            Mat::new(&a, 0, 2, 3).t(),
            0.0,
            MatMut::new(&mut ct, 0, 4, 2),
        );
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(ct[j * 2 + i], c[i * 4 + j]);
            }
        }
    }

    #[test]
    fn accumulates_with_beta() {
        let a = vec![1.0f32, 2.0];
        let b = vec![3.0f32, 4.0];
        let mut c = vec![10.0f32];
        gemm(
            1.0,
            Mat::new(&a, 0, 1, 2),
            Mat::new(&b, 0, 2, 1),
            1.0,
            MatMut::new(&mut c, 0, 1, 1),
        );
        assert_eq!(c[0], 21.0);
    }

    #[test]
    #[should_panic]
    fn rejects_out_of_bounds_view() {
        let a = vec![0.0f32; 5];
        let _ = Mat::new(&a, 0, 2, 3);
    }
}
