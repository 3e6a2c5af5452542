//! Thin safe wrappers over `matrixmultiply::dgemm` for the strided products
//! used by the forward and backward passes.

/// Strided read-only view of an `rows x cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Row-major block of columns `[offset, offset + cols)` of a matrix with
    /// `total_cols` columns.
    pub fn column_block(data: &'a [f64], rows: usize, total_cols: usize, offset: usize, cols: usize) -> Self {
        Self {
            data: &data[offset..],
            rows,
            cols,
            row_stride: total_cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable view.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn column_block(data: &'a mut [f64], rows: usize, total_cols: usize, offset: usize, cols: usize) -> Self {
        Self {
            data: &mut data[offset..],
            rows,
            cols,
            row_stride: total_cols,
            col_stride: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = a * b + beta * c`
pub(crate) fn gemm(a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    a.check();
    b.check();
    c.check();
    if a.cols == 0 {
        for r in 0..c.rows {
            for col in 0..c.cols {
                let v = &mut c.data[r * c.row_stride + col * c.col_stride];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_with_transposes_and_blocks() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let expected = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(View::row_major(&a, m, k), View::row_major(&b, k, n), 0.0, ViewMut::row_major(&mut c, m, n));
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        // b stored transposed (n x k) and read through a transposed view
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(View::row_major(&a, m, k), View::row_major(&bt, n, k).t(), 1.0, ViewMut::row_major(&mut c2, m, n));
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }

        // write into a column block of a wider matrix
        let mut wide = vec![0.0; m * (n + 2)];
        gemm(
            View::row_major(&a, m, k),
            View::row_major(&b, k, n),
            0.0,
            ViewMut::column_block(&mut wide, m, n + 2, 2, n),
        );
        for i in 0..m {
            assert_eq!(wide[i * (n + 2)], 0.0);
            for j in 0..n {
                assert!((wide[i * (n + 2) + 2 + j] - expected[i * n + j]).abs() < 1e-12);
            }
        }
    }
}
