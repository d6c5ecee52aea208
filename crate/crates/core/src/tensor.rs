//! Dense row-major matrices and the handful of vector kernels the model needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sum, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn i.i.d. from `uniform(-scale, scale)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-scale..scale)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `out += self · x`
    pub fn mul_vec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, x);
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_acc(x, &mut out);
        out
    }

    /// `out += selfᵀ · y`
    pub fn tmul_vec_acc(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            axpy(yr, self.row(r), out);
        }
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == T::zero() {
                continue;
            }
            axpy(ar, b, self.row_mut(r));
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: cast_vec(&self.data),
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += alpha · x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::of(x.to_f64_lossy())).collect()
}

pub fn uniform_vec<T: Scalar, R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<T> {
    (0..len).map(|_| T::of(rng.random_range(-scale..scale))).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = sum(out.iter().copied());
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `log softmax`, computed as `z - max - ln Σ exp(z - max)`.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = sum(logits.iter().map(|&z| (z - max).exp())).ln();
    logits.iter().map(|&z| z - max - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.mul_vec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        let mut out = vec![0.0; 3];
        m.tmul_vec_acc(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut m = Matrix::<f64>::zeros(2, 2);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        m.add_outer(&[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(m.as_slice(), &[4.0, 5.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let p = softmax(&[1000.0f64, 999.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1000.0f64, 999.0, -1000.0]);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12 || *a == 0.0);
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
