//! Dense row-major matrices, gate nonlinearities, a portable seeded generator
//! and a central-difference gradient helper.
//!
//! Vectors are carried as `n x 1` matrices. The hot LSTM loops work on the
//! raw slices through the `*_acc` helpers to avoid temporaries.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "column vector must be non-empty");
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::shape("Matrix::from_rows", (i, r.len()), (0, n_cols)));
            }
            data.extend_from_slice(r);
        }
        Self::new(n_rows, n_cols, data)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: self.rows, cols: other.cols, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|x| x * k)
    }

    /// `self += k * other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, k: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out += self * x`.
    #[inline]
    pub fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ * y`.
    #[inline]
    pub fn gemv_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }

    /// `self += a bᵀ`.
    #[inline]
    pub fn outer_acc(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ai == 0.0 {
                continue;
            }
            for (w, bj) in row.iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Logistic function, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_activation(m: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Sigmoid => m.map(sigmoid),
        Activation::Tanh => m.map(f64::tanh),
    }
}

/// Seeded xoshiro256++ stream. Pure integer arithmetic, so draws are
/// identical on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Generator keyed by a path of integers, e.g. `(seed, epoch, index)`.
    /// Independent of any other generator's position.
    pub fn derive(parts: &[u64]) -> Self {
        let mut acc = 0x6A09_E667_F3BC_C908u64;
        for &p in parts {
            acc = Xoshiro256PlusPlus::seed_from_u64(acc ^ p).next_u64();
        }
        Self::new(acc)
    }

    /// Child generator for a numbered stream; leaves `self` untouched.
    pub fn fork(&self, stream: u64) -> Self {
        let mut probe = self.inner.clone();
        Self::derive(&[probe.next_u64(), probe.next_u64(), stream])
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

pub fn rng_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform()).collect();
    Matrix { rows, cols, data }
}

/// Central differences of a scalar function, one entry at a time.
pub fn numeric_gradient<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows, x.cols);
    for k in 0..x.data.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + eps;
        let plus = f(&probe);
        probe.data[k] = orig - eps;
        let minus = f(&probe);
        probe.data[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation at entry {k}")));
        }
        grad.data[k] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let id = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(id.matmul(&v).unwrap(), v);

        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 1);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x1"), "{msg}");
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(apply_activation(&z, Activation::Sigmoid).as_slice(), &[0.5]);
        assert_eq!(apply_activation(&z, Activation::Tanh).as_slice(), &[0.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        // Reference: 1/(1+e^-1000) is 1 to double precision; e^-1000 underflows to 0.
        let big = sigmoid(1000.0);
        assert!(big > 0.0 && big <= 1.0);
        assert_eq!(big, 1.0);
        let small = sigmoid(-1000.0);
        assert!((0.0..1e-300).contains(&small));
        assert!(sigmoid(-800.0).is_finite());
        // sigmoid(-30) = e^-30 / (1 + e^-30); compare to the series e^-30 - e^-60.
        let r = (-30.0f64).exp() - (-60.0f64).exp();
        assert!((sigmoid(-30.0) - r).abs() / r < 1e-15);
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let a = rng_uniform(&mut Rng::new(42), 3, 4);
        let b = rng_uniform(&mut Rng::new(42), 3, 4);
        assert_eq!(a, b);
        let c = rng_uniform(&mut Rng::new(43), 3, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn rng_known_first_draws() {
        // Frozen so any change to the generator is caught.
        let mut r = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        let mut again = Rng::new(0);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(FROZEN_SEED0.to_vec(), first);
    }

    const FROZEN_SEED0: [u64; 3] = [0x53175D61490B23DF, 0x61DA6F3DC380D507, 0x5C0FDF91EC9A7BFC];

    #[test]
    fn rng_uniform_mean_and_range() {
        let mut rng = Rng::new(7);
        let m = rng_uniform(&mut rng, 1000, 100);
        assert!(m.as_slice().iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = m.sum() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::new(1);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = rng.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn numeric_gradient_linear_and_quadratic() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let g = numeric_gradient(|m| m.sum(), &x, 1e-5).unwrap();
        for v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9);
        }

        let x = Matrix::column(&[3.0]);
        let g = numeric_gradient(|m| m.norm_sq(), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn numeric_gradient_matches_squared_norm() {
        let mut rng = Rng::new(11);
        let x = rng_uniform(&mut rng, 2, 2).map(|v| 4.0 * v - 2.0);
        let g = numeric_gradient(|m| m.norm_sq(), &x, 1e-5).unwrap();
        for (gi, xi) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn numeric_gradient_rejects_nonfinite() {
        let x = Matrix::column(&[0.0]);
        assert!(numeric_gradient(|m| 1.0 / m.get(0, 0).abs().min(0.0), &x, 1e-5).is_err());
        assert!(numeric_gradient(|m| m.sum(), &x, 0.0).is_err());
    }
}
