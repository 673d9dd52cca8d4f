//! Dense row-major matrices and the scalar trait the networks are generic over.
//!
//! Training runs in `f32`; gradient checks run the identical code paths in
//! `f64`. Matrix products go through `matrixmultiply`, which handles the
//! transposed operands via strides.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c.iter_mut() {
                        *v = *v * beta;
                    }
                    return;
                }
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
                // SAFETY: the extents of all three operands were bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let cols = self.cols + other.cols;
        let mut out = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            out.extend_from_slice(self.row(r));
            out.extend_from_slice(other.row(r));
        }
        Mat::from_vec(self.rows, cols, out)
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Mat<T>, Mat<T>) {
        assert!(at <= self.cols);
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for r in 0..self.rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (Mat::from_vec(self.rows, at, left), Mat::from_vec(self.rows, self.cols - at, right))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat<T> {
        Mat::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// `a * b`.
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Mat::zeros(a.rows, b.cols);
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        T::zero(),
        &mut c.data,
        b.cols as isize,
        1,
    );
    c
}

/// `a * bᵀ`.
pub fn matmul_bt<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut c = Mat::zeros(a.rows, b.rows);
    T::gemm(
        a.rows,
        a.cols,
        b.rows,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        T::zero(),
        &mut c.data,
        b.rows as isize,
        1,
    );
    c
}

/// `acc += aᵀ * b`; the weight-gradient product.
pub fn matmul_at_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, acc: &mut [T]) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!(acc.len(), a.cols * b.cols);
    T::gemm(
        a.cols,
        a.rows,
        b.cols,
        T::one(),
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        T::one(),
        acc,
        b.cols as isize,
        1,
    );
}

/// `aᵀ * b`.
pub fn matmul_at<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.cols, b.cols);
    matmul_at_acc(a, b, &mut c.data);
    c
}

/// `acc += a * bᵀ`.
pub fn matmul_bt_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, acc: &mut [T]) {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    assert_eq!(acc.len(), a.rows * b.rows);
    T::gemm(
        a.rows,
        a.cols,
        b.rows,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        T::one(),
        acc,
        b.rows as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                c.data[i * b.cols + j] = s;
            }
        }
        c
    }

    fn filled(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
        let data = (0..rows * cols).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn products_match_naive_loops() {
        let a = filled(5, 7, 0.1);
        let b = filled(7, 3, 1.3);
        let c = matmul(&a, &b);
        let d = naive(&a, &b);
        for (x, y) in c.data.iter().zip(&d.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = filled(3, 7, 2.0);
        let mut btt = Mat::zeros(7, 3);
        for i in 0..3 {
            for j in 0..7 {
                btt.data[j * 3 + i] = bt.at(i, j);
            }
        }
        let c = matmul_bt(&a, &bt);
        let d = naive(&a, &btt);
        for (x, y) in c.data.iter().zip(&d.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let x = filled(7, 5, 0.7);
        let mut acc = vec![1.0; 5 * 3];
        matmul_at_acc(&x, &b, &mut acc);
        let mut xt = Mat::zeros(5, 7);
        for i in 0..7 {
            for j in 0..5 {
                xt.data[j * 7 + i] = x.at(i, j);
            }
        }
        let d = naive(&xt, &b);
        for (x, y) in acc.iter().zip(&d.data) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn hcat_then_hsplit_restores_parts() {
        let a = filled(4, 3, 0.0);
        let b = filled(4, 2, 5.0);
        let (l, r) = a.hcat(&b).hsplit(3);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }
}
