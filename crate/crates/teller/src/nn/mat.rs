//! Dense row-major matrices over `f32`/`f64`.
//!
//! Everything trainable in this crate is a small dense matrix, so a plain
//! `Vec`-backed type with a handful of fused kernels is all we need. Matmul
//! kernels accumulate strictly in ascending `k` order; the incremental
//! decoder relies on that to reproduce full-sequence results bit for bit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Below this many multiply-adds a matmul stays single-threaded.
const PAR_WORK_THRESHOLD: usize = 1 << 18;

/// Scalar type the numeric stack is generic over.
///
/// Training and inference run in `f32` (checkpoints store `f32` blocks);
/// gradient checks re-run the same graphs in `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<R>,
    {
        let s = R::from_f64(std);
        let data = (0..rows * cols)
            .map(|_| {
                let x: R = StandardNormal.sample(rng);
                x * s
            })
            .collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self (m×k) · other (k×n)`. Each output element accumulates in
    /// ascending `k`; rows may be computed on different threads without
    /// changing any bit of the result.
    pub fn matmul(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        let kernel = |i: usize, o_row: &mut [R]| {
            let a_row = self.row(i);
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, o_row)| kernel(i, o_row));
        } else {
            for (i, o_row) in out.data.chunks_mut(n).enumerate() {
                kernel(i, o_row);
            }
        }
        out
    }

    /// `self (m×k) · otherᵀ (k×n)` where `other` is `n×k`.
    pub fn matmul_nt(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(m, n);
        let kernel = |i: usize, o_row: &mut [R]| {
            let a_row = self.row(i);
            for (j, o) in o_row.iter_mut().enumerate() {
                *o = dot(a_row, other.row(j));
            }
        };
        if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, o_row)| kernel(i, o_row));
        } else {
            for (i, o_row) in out.data.chunks_mut(n).enumerate() {
                kernel(i, o_row);
            }
        }
        out
    }

    /// `selfᵀ · other`: treats `self` as `k×m`, result `m×n`.
    pub fn matmul_tn(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dims");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        let kernel = |i: usize, o_row: &mut [R]| {
            for p in 0..k {
                let a = self.data[p * m + i];
                let b_row = other.row(p);
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, o_row)| kernel(i, o_row));
        } else {
            for (i, o_row) in out.data.chunks_mut(n).enumerate() {
                kernel(i, o_row);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<R>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: R) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Lossily convert element type (used to build `f64` twins for checks).
    pub fn cast<S: Real>(&self) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| S::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Plain dot product, ascending index order (no reassociation).
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = R::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}
