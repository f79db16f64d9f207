//! Bounds-checked row-major GEMM on top of `matrixmultiply`.

use crate::scalar::Scalar;

/// Row-major matrix view: `rows x cols` with leading dimension `ld`, read
/// transposed when `trans` is set (the stored matrix is then `cols x rows`).
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
    pub trans: bool,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            ld: cols,
            trans: false,
        }
    }

    /// The logical transpose of a stored `rows x cols` matrix.
    pub fn transposed(data: &'a [T], stored_rows: usize, stored_cols: usize) -> Self {
        View {
            data,
            rows: stored_cols,
            cols: stored_rows,
            ld: stored_cols,
            trans: true,
        }
    }

    pub fn with_ld(mut self, ld: usize) -> Self {
        self.ld = ld;
        self
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let (sr, sc) = if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        assert!(sc <= self.ld, "leading dimension smaller than row length");
        assert!(
            (sr - 1) * self.ld + sc <= self.data.len(),
            "matrix view exceeds its buffer"
        );
    }
}

/// `c = alpha * a * b + beta * c` where `c` is `a.rows x b.cols` row-major with
/// leading dimension `ldc`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(n <= ldc && (m - 1) * ldc + n <= c.len(), "output view exceeds its buffer");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    a.check();
    b.check();
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three views were bounds-checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_strided(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(1.0, View::new(&a, 2, 3), View::new(&b, 3, 2), 0.0, &mut c, 2);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T (3x2) times a (2x3)
        let mut d = [0.0; 9];
        gemm(1.0, View::transposed(&a, 2, 3), View::new(&a, 2, 3), 0.0, &mut d, 3);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
