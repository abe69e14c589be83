//! Dense row-major `f64` matrices and the handful of products the factorizer needs.
//!
//! Products that reduce over the long (row) dimension are computed in fixed
//! blocks of [`ROW_BLOCK`] rows whose partial results are summed in block
//! order. The block layout never depends on the thread count, which keeps
//! every result bit-identical between sequential and parallel builds.

use serde::{Deserialize, Serialize};

use crate::par;

/// Row count of one reduction block.
pub const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps row-major data. Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

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
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Squared Frobenius norm, summed in fixed row blocks.
    pub fn frobenius_sq(&self) -> f64 {
        blocked_sum(self.rows, |start, end| {
            self.data[start * self.cols..end * self.cols]
                .iter()
                .map(|v| v * v)
                .sum()
        })
    }

    /// `self · other`.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let width = other.cols;
        if width == 0 {
            return out;
        }
        par::for_each_chunk_mut(&mut out.data, width * ROW_BLOCK, |bi, chunk| {
            for (local, out_row) in chunk.chunks_mut(width).enumerate() {
                let a_row = self.row(bi * ROW_BLOCK + local);
                for (k, &a) in a_row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                        *o += a * b;
                    }
                }
            }
        });
        out
    }

    /// `self · otherᵀ`.
    pub fn mul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        let width = other.rows;
        if width == 0 {
            return out;
        }
        par::for_each_chunk_mut(&mut out.data, width * ROW_BLOCK, |bi, chunk| {
            for (local, out_row) in chunk.chunks_mut(width).enumerate() {
                let a_row = self.row(bi * ROW_BLOCK + local);
                for (o, k) in out_row.iter_mut().zip(0..width) {
                    *o = dot(a_row, other.row(k));
                }
            }
        });
        out
    }

    /// `selfᵀ · other`, reducing over the shared row dimension.
    pub fn t_mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "row count mismatch");
        let (kc, oc) = (self.cols, other.cols);
        let partials = par::map_indexed(block_count(self.rows), |bi| {
            let start = bi * ROW_BLOCK;
            let end = (start + ROW_BLOCK).min(self.rows);
            let mut acc = vec![0.0; kc * oc];
            for r in start..end {
                let a_row = self.row(r);
                let b_row = other.row(r);
                for (k, &a) in a_row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &b) in acc[k * oc..(k + 1) * oc].iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
            acc
        });
        let mut out = vec![0.0; kc * oc];
        for part in partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
        Matrix::from_vec(kc, oc, out)
    }

    /// `‖self − left · right‖²_F`, evaluated entrywise (no expansion of the square).
    pub fn residual_sq(&self, left: &Matrix, right: &Matrix) -> f64 {
        assert_eq!(left.rows, self.rows);
        assert_eq!(right.cols, self.cols);
        assert_eq!(left.cols, right.rows);
        let cols = self.cols;
        blocked_sum(self.rows, |start, end| {
            let mut recon = vec![0.0; cols];
            let mut acc = 0.0;
            for r in start..end {
                recon.iter_mut().for_each(|v| *v = 0.0);
                for (k, &s) in left.row(r).iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    for (o, &p) in recon.iter_mut().zip(right.row(k)) {
                        *o += s * p;
                    }
                }
                for (&v, &q) in self.row(r).iter().zip(&recon) {
                    let d = v - q;
                    acc += d * d;
                }
            }
            acc
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn block_count(rows: usize) -> usize {
    rows.div_ceil(ROW_BLOCK)
}

/// Sums `f(start, end)` over fixed row blocks, in block order.
fn blocked_sum<F>(rows: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    par::map_indexed(block_count(rows), |bi| {
        let start = bi * ROW_BLOCK;
        f(start, (start + ROW_BLOCK).min(rows))
    })
    .into_iter()
    .sum()
}
