//! Dense matrices, one-sided Jacobi SVD, and truncated-rank helpers.
//!
//! The matrices here are tiny (at most the number of agents on a side), so a
//! dependency-free Jacobi sweep is plenty.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvdError {
    #[error("rank {k} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { k: usize, rows: usize, cols: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.concat() }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Thin SVD `A = U diag(sigma) V^T` with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x p` left singular vectors, `p = min(rows, cols)`.
    pub u: Mat,
    /// Singular values, nonnegative, descending.
    pub sigma: Vec<f64>,
    /// `cols x p` right singular vectors.
    pub v: Mat,
}

const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 60;

/// One-sided Jacobi SVD for small dense matrices.
///
/// Columns of a working copy are orthogonalized by Givens rotations, the
/// rotations accumulate into `V`, and column norms become singular values.
/// Sign convention: the largest-magnitude entry of each left singular vector
/// is made positive; on ties between singular values the first-computed basis
/// is kept.
pub fn svd(a: &Mat) -> Svd {
    if a.rows < a.cols {
        // Work on the transpose and swap factors back.
        let t = svd(&a.transpose());
        return Svd { u: t.v, sigma: t.sigma, v: t.u };
    }
    let m = a.rows;
    let n = a.cols;
    let mut work = a.clone();
    let mut v = Mat::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut off_diag = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..m {
                    let wp = work.get(r, p);
                    let wq = work.get(r, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                off_diag = true;
                // Jacobi rotation zeroing the (p, q) inner product.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wp = work.get(r, p);
                    let wq = work.get(r, q);
                    work.set(r, p, c * wp - s * wq);
                    work.set(r, q, s * wp + c * wq);
                }
                for r in 0..n {
                    let vp = v.get(r, p);
                    let vq = v.get(r, q);
                    v.set(r, p, c * vp - s * vq);
                    v.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !off_diag {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|r| work.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut u = Mat::zeros(m, n);
    for cidx in 0..n {
        if sigma[cidx] > 0.0 {
            for r in 0..m {
                u.set(r, cidx, work.get(r, cidx) / sigma[cidx]);
            }
        } else {
            // Degenerate column: any unit vector works, pick a basis vector.
            u.set(cidx.min(m - 1), cidx, 1.0);
        }
    }

    // Stable descending sort keeps the first-computed basis on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut u_sorted = Mat::zeros(m, n);
    let mut v_sorted = Mat::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = sigma[src];
        for r in 0..m {
            u_sorted.set(r, dst, u.get(r, src));
        }
        for r in 0..n {
            v_sorted.set(r, dst, v.get(r, src));
        }
    }
    sigma = s_sorted;
    u = u_sorted;
    v = v_sorted;

    // Sign convention on the left vectors.
    for c in 0..n {
        let mut best = 0;
        for r in 1..m {
            if u.get(r, c).abs() > u.get(best, c).abs() {
                best = r;
            }
        }
        if u.get(best, c) < 0.0 {
            for r in 0..m {
                let x = u.get(r, c);
                u.set(r, c, -x);
            }
            for r in 0..n {
                let x = v.get(r, c);
                v.set(r, c, -x);
            }
        }
    }

    Svd { u, sigma, v }
}

/// Best rank-`k` approximation in Frobenius norm (truncated SVD).
pub fn rank_k_approximation(a: &Mat, k: usize) -> Result<Mat, SvdError> {
    let p = a.rows().min(a.cols());
    if k == 0 || k > p {
        return Err(SvdError::RankOutOfRange { k, rows: a.rows(), cols: a.cols() });
    }
    let dec = svd(a);
    let mut out = Mat::zeros(a.rows(), a.cols());
    for idx in 0..k {
        let s = dec.sigma[idx];
        if s == 0.0 {
            continue;
        }
        for r in 0..a.rows() {
            let us = dec.u.get(r, idx) * s;
            for c in 0..a.cols() {
                let cur = out.get(r, c);
                out.set(r, c, cur + us * dec.v.get(c, idx));
            }
        }
    }
    Ok(out)
}

/// Number of singular values above `tolerance * sigma_max`.
pub fn numerical_rank(a: &Mat, tolerance: f64) -> Result<usize, SvdError> {
    if !(tolerance > 0.0) {
        return Err(SvdError::BadTolerance(tolerance));
    }
    let dec = svd(a);
    let smax = dec.sigma.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(dec.sigma.iter().filter(|&&s| s > tolerance * smax).count())
}
