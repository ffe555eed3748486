//! Dense kernels: row-major matrices, products, row softmax, sphere
//! normalization and singular spectra via cyclic Jacobi rotations.
//!
//! Every kernel computes each output row with a fixed summation order, so
//! switching on the row-parallel mode never changes a single bit of output.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{LabError, Result};

/// Off-diagonal Frobenius norm, relative to the full norm, at which Jacobi stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of cyclic Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Singular values below this fraction of the largest are clamped to zero.
pub const SPECTRUM_CLAMP: f64 = 1e-12;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables or disables row-parallel kernels process-wide.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LabError::invalid(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LabError::invalid(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::invalid(format!(
                "non-finite entry at ({}, {})",
                i / cols,
                i % cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::invalid("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix with every entry equal to `value`.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Internal constructor for kernels whose output is finite by construction.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy with rows reordered: output row `i` is input row `order[i]`.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_parts(order.len(), self.cols, data)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn fill_rows<F>(rows: usize, cols: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; rows * cols];
    if parallel_enabled() && rows > 1 {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
    out
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LabError::invalid(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let data = fill_rows(a.rows, n, |i, out| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    });
    Ok(Matrix::from_parts(a.rows, n, data))
}

/// Product `a · bᵀ`, i.e. all pairwise row inner products.
pub fn matmul_transpose(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LabError::invalid(format!(
            "cannot form {}x{} times transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let data = fill_rows(a.rows, b.rows, |i, out| {
        let ai = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Ok(Matrix::from_parts(a.rows, b.rows, data))
}

/// Row-wise softmax of `a / temperature`, stabilized by subtracting each row's maximum.
pub fn row_softmax(a: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LabError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let data = fill_rows(a.rows, a.cols, |i, out| {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = ((v - max) / temperature).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    });
    Ok(Matrix::from_parts(a.rows, a.cols, data))
}

/// Scales every row to unit Euclidean norm.
pub fn row_normalize_sphere(a: &Matrix) -> Result<Matrix> {
    if let Some(i) = (0..a.rows).find(|&i| norm(a.row(i)) == 0.0) {
        return Err(LabError::Degenerate {
            what: "zero row cannot be projected to the sphere".into(),
            index: i,
        });
    }
    let data = fill_rows(a.rows, a.cols, |i, out| {
        let row = a.row(i);
        let n = norm(row);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v / n;
        }
    });
    Ok(Matrix::from_parts(a.rows, a.cols, data))
}

/// Nonincreasing singular values plus the same values scaled to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl Spectrum {
    fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let top = values.first().copied().unwrap_or(0.0);
        for v in values.iter_mut() {
            if *v < SPECTRUM_CLAMP * top || *v < 0.0 {
                *v = 0.0;
            }
        }
        let total: f64 = values.iter().sum();
        let normalized = if total > 0.0 {
            values.iter().map(|v| v / total).collect()
        } else {
            vec![0.0; values.len()]
        };
        Spectrum { values, normalized }
    }

    /// Shannon entropy (nats) of the normalized spectrum; zeros contribute nothing.
    pub fn entropy(&self) -> f64 {
        let s: f64 = self.normalized.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
        // `0.0 - s` rather than `-s` so a single unit mass yields +0
        0.0 - s
    }

    pub fn is_zero(&self) -> bool {
        self.values.first().is_none_or(|&v| v == 0.0)
    }
}

/// Singular values of `a`, from the eigenvalues of the smaller Gram matrix.
pub fn singular_spectrum(a: &Matrix) -> Result<Spectrum> {
    let vectors = if a.rows < a.cols { a.clone() } else { a.transpose() };
    Ok(Spectrum::from_values(one_sided_jacobi(
        vectors,
        JACOBI_TOLERANCE,
        JACOBI_MAX_SWEEPS,
    )?))
}

/// One-sided (Hestenes) Jacobi: orthogonalizes the rows of `b` by plane
/// rotations and returns their final norms.
///
/// Each rotation is the two-sided Jacobi rotation of the Gram matrix `b bᵀ`
/// applied implicitly, so the Gram matrix is never formed and small singular
/// values keep full relative accuracy. Converges when every pair satisfies
/// `|⟨b_p, b_q⟩| ≤ tol ‖b_p‖ ‖b_q‖`.
fn one_sided_jacobi(mut b: Matrix, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let n = b.rows;
    let m = b.cols;
    // rows this small sit below the spectrum clamp; their direction is noise
    let negligible = (1e-15 * b.frobenius_norm()).powi(2);
    for _ in 0..max_sweeps {
        let mut residual: f64 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (bp, bq) = (b.row(p), b.row(q));
                let alpha = dot(bp, bp);
                let beta = dot(bq, bq);
                let gamma = dot(bp, bq);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let rel = gamma.abs() / scale;
                residual = residual.max(rel);
                if rel <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = b.data.split_at_mut(q * m);
                let rp = &mut lo[p * m..(p + 1) * m];
                let rq = &mut hi[..m];
                for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
                    let (u, v) = (*x, *y);
                    *x = c * u - s * v;
                    *y = s * u + c * v;
                }
            }
        }
        if residual <= tol {
            return Ok((0..n).map(|i| norm(b.row(i))).collect());
        }
    }
    let residual = (0..n)
        .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
        .map(|(p, q)| {
            let (bp, bq) = (b.row(p), b.row(q));
            let (alpha, beta) = (dot(bp, bp), dot(bq, bq));
            if alpha <= negligible || beta <= negligible {
                0.0
            } else {
                dot(bp, bq).abs() / (alpha * beta).sqrt()
            }
        })
        .fold(0.0, f64::max);
    Err(LabError::NumericalFailure {
        what: "singular values did not converge".into(),
        residual,
        iterations: max_sweeps,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Stops once the off-diagonal Frobenius norm falls below `tol` times the
/// full norm; fails with the final residual after `max_sweeps` sweeps.
pub fn symmetric_eigenvalues(s: &Matrix, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let n = s.rows;
    if s.cols != n {
        return Err(LabError::invalid("eigenvalues need a square matrix"));
    }
    let mut a = s.data.clone();
    let total = s.frobenius_norm();
    if total == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off_norm = |a: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        acc.sqrt()
    };
    let mut residual = off_norm(&a);
    let mut sweeps = 0;
    while residual > tol * total {
        if sweeps == max_sweeps {
            return Err(LabError::NumericalFailure {
                what: "Jacobi eigenvalue iteration did not converge".into(),
                residual: residual / total,
                iterations: sweeps,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                if apq.abs() <= 0.5 * f64::EPSILON * (app.abs() * aqq.abs()).sqrt() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = c * akp - sn * akq;
                    let new_kq = sn * akp + c * akq;
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
            }
        }
        sweeps += 1;
        residual = off_norm(&a);
    }
    Ok((0..n).map(|i| a[i * n + i]).collect())
}
