//! Minimal row-major matrix over f32/f64. The attention kernels own their
//! inner loops, so this stays a thin container with the handful of dense
//! products the toy model needs.

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar abstraction: exactly f32 and f64. Conversions are explicit so
/// precision switches never happen silently.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const PRECISION_BITS: u32;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION_BITS: u32 = 32;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION_BITS: u32 = 64;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Gaussian entries with the given standard deviation. Samples are drawn
    /// in f64 then cast, so f32 and f64 models share initializations.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let z: f64 = rng.sample(StandardNormal);
            data.push(T::from_f64(z * std));
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// self (m x k) times rhs (k x n).
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims");
        let (m, n) = (self.rows, rhs.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (kk, &a) in self.row(i).iter().enumerate() {
                let rhs_row = rhs.row(kk);
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// self (m x k) times rhs^T where rhs is (n x k).
    pub fn matmul_nt(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dims");
        let (m, n) = (self.rows, rhs.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a = self.row(i);
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b = rhs.row(j);
                let mut acc = T::zero();
                for (x, y) in a.iter().zip(b) {
                    acc = acc + *x * *y;
                }
                *o = acc;
            }
        }
        out
    }

    /// self^T (k x m becomes m x k) times rhs (k x n): self is (k x m).
    pub fn matmul_tn(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dims");
        let (m, n) = (self.cols, rhs.cols);
        let mut out = Mat::zeros(m, n);
        for kk in 0..self.rows {
            let a = self.row(kk);
            let b = rhs.row(kk);
            for (i, &av) in a.iter().enumerate() {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o = *o + av * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add dims");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub dims");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add dims");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| U::from_f64(a.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, rhs: &Mat<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "diff dims");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&a| a.to_f64() * a.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::<f64>::from_fn(3, 4, |r, c| (r * 7 + c) as f64 * 0.25 - 1.0);
        let b = Mat::<f64>::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.5);
        let plain = a.matmul(&b);
        let via_nt = a.matmul_nt(&b.transpose());
        let via_tn = a.transpose().matmul_tn(&b);
        assert!(plain.max_abs_diff(&via_nt) < 1e-12);
        assert!(plain.max_abs_diff(&via_tn) < 1e-12);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let a = Mat::<f32>::from_fn(2, 3, |r, c| (r as f32 + 0.5) * (c as f32 - 1.5));
        let back: Mat<f32> = a.cast::<f64>().cast();
        assert_eq!(a, back);
    }
}
