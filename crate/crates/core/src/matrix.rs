//! Dense row-major matrices and a randomized truncated SVD.
//!
//! Products go through `matrixmultiply`'s blocked kernels, which are
//! single-threaded here so results are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataset::RatingMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {got} cannot hold a {rows}x{cols} matrix")]
    BadLength {
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("rank {rank} out of range (max {max})")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("matrix contains non-finite values")]
    NonFinite,
}

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Whether an operand of [`gemm`] is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(MatrixError::DimensionMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self::from_fn(
            diag.len(),
            diag.len(),
            |r, c| if r == c { diag[r] } else { 0.0 },
        )
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
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            1.0,
            self,
            Transpose::No,
            other,
            Transpose::No,
            0.0,
            &mut out,
        )?;
        Ok(out)
    }

    /// `self += alpha · x`.
    pub fn axpy(&mut self, alpha: f64, x: &DenseMatrix) -> Result<(), MatrixError> {
        if self.shape() != x.shape() {
            return Err(MatrixError::DimensionMismatch {
                op: "axpy",
                left: self.shape(),
                right: x.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the column range `[start, end)` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start <= end && end <= self.cols);
        let width = end - start;
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Concatenates `[self, right]` column-wise.
    pub fn hstack(&self, right: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.rows != right.rows {
            return Err(MatrixError::DimensionMismatch {
                op: "hstack",
                left: self.shape(),
                right: right.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, self.cols + right.cols);
        for r in 0..self.rows {
            let row = out.row_mut(r);
            row[..self.cols].copy_from_slice(self.row(r));
            row[self.cols..].copy_from_slice(right.row(r));
        }
        Ok(out)
    }
}

fn op_shape(m: &DenseMatrix, t: Transpose) -> (usize, usize) {
    match t {
        Transpose::No => (m.rows, m.cols),
        Transpose::Yes => (m.cols, m.rows),
    }
}

fn op_strides(m: &DenseMatrix, t: Transpose) -> (isize, isize) {
    match t {
        Transpose::No => (m.cols as isize, 1),
        Transpose::Yes => (1, m.cols as isize),
    }
}

/// General product `c ← alpha·op(a)·op(b) + beta·c`.
///
/// When `beta == 0` the previous contents of `c` are never read.
pub fn gemm(
    alpha: f64,
    a: &DenseMatrix,
    ta: Transpose,
    b: &DenseMatrix,
    tb: Transpose,
    beta: f64,
    c: &mut DenseMatrix,
) -> Result<(), MatrixError> {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 || c.shape() != (m, n) {
        return Err(MatrixError::DimensionMismatch {
            op: "gemm",
            left: (m, k),
            right: (k2, n),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        if beta == 0.0 {
            c.data.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.scale(beta);
        }
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, ta);
    let (rsb, csb) = op_strides(b, tb);
    // SAFETY: the shapes and strides above describe exactly the storage of
    // `a`, `b` and `c`, which outlive the call; `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
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
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// Rank-k factorization `A ≈ U · diag(S) · Vt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    /// m×k, orthonormal columns.
    pub u: DenseMatrix,
    /// k singular values, non-negative and descending.
    pub singular_values: Vec<f64>,
    /// k×n, orthonormal rows.
    pub vt: DenseMatrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(S) · Vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        us.matmul(&self.vt)
            .expect("svd factors have agreeing shapes")
    }
}

/// Oversampling columns added to the randomized range finder.
pub const SVD_OVERSAMPLING: usize = 10;
/// Power iterations applied to the randomized range finder.
pub const SVD_POWER_ITERATIONS: usize = 2;

/// Dense copy of the observed ratings shifted by `mu`; unobserved cells are 0.
pub fn fill_and_center(matrix: &RatingMatrix, mu: f64) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(matrix.n_users(), matrix.n_items());
    for (u, i, r) in matrix.observed() {
        out.set(u, i, r - mu);
    }
    out
}

/// Randomized rank-`k` SVD: Gaussian range finder with oversampling and power
/// iterations, then an exact one-sided Jacobi SVD of the projected matrix.
///
/// When `k + oversampling` covers `min(m, n)` the projection is lossless and
/// the result is the exact truncated SVD up to rounding.
pub fn truncated_svd(a: &DenseMatrix, k: usize, seed: u64) -> Result<TruncatedSvd, MatrixError> {
    let (m, n) = a.shape();
    let max_rank = m.min(n);
    if k > max_rank {
        return Err(MatrixError::RankOutOfRange {
            rank: k,
            max: max_rank,
        });
    }
    if !a.is_finite() {
        return Err(MatrixError::NonFinite);
    }
    if k == 0 {
        return Ok(TruncatedSvd {
            u: DenseMatrix::zeros(m, 0),
            singular_values: Vec::new(),
            vt: DenseMatrix::zeros(0, n),
        });
    }

    let width = (k + SVD_OVERSAMPLING).min(max_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DenseMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut basis = orthonormal_basis(&a.matmul(&omega)?);
    for _ in 0..SVD_POWER_ITERATIONS {
        let mut z = DenseMatrix::zeros(n, width);
        gemm(1.0, a, Transpose::Yes, &basis, Transpose::No, 0.0, &mut z)?;
        let z = orthonormal_basis(&z);
        basis = orthonormal_basis(&a.matmul(&z)?);
    }

    // G = Aᵀ Q is the transpose of the projected matrix B = Qᵀ A.
    let mut g = DenseMatrix::zeros(n, width);
    gemm(1.0, a, Transpose::Yes, &basis, Transpose::No, 0.0, &mut g)?;
    let small = jacobi_svd(&g);

    // B = J Σ Ũᵀ  ⇒  A ≈ (Q J) Σ Ũᵀ.
    let u_full = basis.matmul(&small.right)?;
    let mut u = DenseMatrix::zeros(m, k);
    let mut vt = DenseMatrix::zeros(k, n);
    for (dst, &src) in small.order.iter().take(k).enumerate() {
        for r in 0..m {
            u.set(r, dst, u_full.get(r, src));
        }
        for c in 0..n {
            vt.set(dst, c, small.left.get(c, src));
        }
    }
    let singular_values = small
        .order
        .iter()
        .take(k)
        .map(|&j| small.sigma[j])
        .collect();
    Ok(TruncatedSvd {
        u,
        singular_values,
        vt,
    })
}

/// `P = U·diag(√S)` (m×k) and `Q = diag(√S)·Vt` (k×n).
pub fn factor_split(svd: &TruncatedSvd) -> (DenseMatrix, DenseMatrix) {
    let roots: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.max(0.0).sqrt())
        .collect();
    let mut p = svd.u.clone();
    for r in 0..p.rows() {
        for (v, s) in p.row_mut(r).iter_mut().zip(&roots) {
            *v *= s;
        }
    }
    let mut q = svd.vt.clone();
    for (f, s) in roots.iter().enumerate() {
        q.row_mut(f).iter_mut().for_each(|v| *v *= s);
    }
    (p, q)
}

/// Thin Householder QR; returns the m×l factor Q with orthonormal columns.
/// Rank-deficient inputs still yield an orthonormal Q.
fn orthonormal_basis(y: &DenseMatrix) -> DenseMatrix {
    let (m, l) = y.shape();
    debug_assert!(m >= l);
    let mut a = y.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(l);
    for j in 0..l {
        let mut v: Vec<f64> = (j..m).map(|r| a.get(r, j)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            apply_reflector(&mut a, &v, j, j);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        reflectors.push(v);
    }
    let mut q = DenseMatrix::zeros(m, l);
    for j in 0..l {
        q.set(j, j, 1.0);
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        apply_reflector(&mut q, v, j, 0);
    }
    q
}

/// Applies `I − 2vvᵀ` to rows `offset..` and columns `first_col..` of `a`.
fn apply_reflector(a: &mut DenseMatrix, v: &[f64], offset: usize, first_col: usize) {
    let cols = a.cols();
    let mut dots = vec![0.0; cols - first_col];
    for (t, vt) in v.iter().enumerate() {
        if *vt == 0.0 {
            continue;
        }
        let row = &a.row(offset + t)[first_col..];
        for (d, x) in dots.iter_mut().zip(row) {
            *d += vt * x;
        }
    }
    for (t, vt) in v.iter().enumerate() {
        if *vt == 0.0 {
            continue;
        }
        let row = &mut a.row_mut(offset + t)[first_col..];
        for (x, d) in row.iter_mut().zip(&dots) {
            *x -= 2.0 * vt * d;
        }
    }
}

struct JacobiSvd {
    /// r×c left singular vectors (unsorted columns).
    left: DenseMatrix,
    /// c×c right singular vectors (unsorted columns).
    right: DenseMatrix,
    sigma: Vec<f64>,
    /// Column indices sorted by descending singular value.
    order: Vec<usize>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of an r×c matrix.
fn jacobi_svd(g: &DenseMatrix) -> JacobiSvd {
    let (r, c) = g.shape();
    // Column-major working copies.
    let mut w: Vec<Vec<f64>> = (0..c).map(|j| g.column(j)).collect();
    let mut rot: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..c).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in (p + 1)..c {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_pair(&mut w, p, q, cs, sn);
                rotate_pair(&mut rot, p, q, cs, sn);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let sigma_max = order.first().map_or(0.0, |&j| sigma[j]);
    let tiny = sigma_max * (r.max(c) as f64) * f64::EPSILON;
    let mut left = DenseMatrix::zeros(r, c);
    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(c);
    for &j in &order {
        let col = if sigma[j] > tiny && sigma[j] > 0.0 {
            w[j].iter().map(|x| x / sigma[j]).collect()
        } else {
            complete_basis(&filled, r)
        };
        for (i, x) in col.iter().enumerate() {
            left.set(i, j, *x);
        }
        filled.push(col);
    }
    let mut right = DenseMatrix::zeros(c, c);
    for (j, col) in rot.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            right.set(i, j, *x);
        }
    }
    JacobiSvd {
        left,
        right,
        sigma,
        order,
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, cs: f64, sn: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = cs * a - sn * b;
        *y = sn * a + cs * b;
    }
}

/// A unit vector orthogonal to every vector in `basis`, picked from the
/// standard basis by largest residual after two rounds of Gram-Schmidt.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, v));
        }
        if norm > 0.5 {
            break;
        }
    }
    let (norm, mut v) = best.expect("dimension is at least one");
    v.iter_mut().for_each(|x| *x /= norm);
    v
}
