//! Dense row-major linear algebra: products, Householder QR, triangular and
//! least-squares solves, one-sided Jacobi SVD.
//!
//! Everything here is a pure function of its inputs. Matrices are small to
//! moderate (a few thousand rows at most), so the kernels are plain loops
//! arranged so the innermost loop walks contiguous memory.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative threshold on `|R_jj| / ‖A‖_F` below which QR reports rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-10;

/// Relative threshold on `|r_jj| / ‖r‖_F` below which a triangular solve is refused.
pub const TRIANGULAR_TOL: f64 = 1e-14;

/// Default relative rank cutoff for [`jacobi_svd`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    InvalidLength { rows: usize, cols: usize, len: usize },
    #[error("matrix is rank deficient at column {column} (|R_jj| = {value:e})")]
    RankDeficient { column: usize, value: f64 },
    #[error("triangular matrix is numerically singular at diagonal index {index}")]
    SingularTriangular { index: usize },
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("{op}: expected a matrix with rows >= cols, got {rows}x{cols}")]
    NotTall { op: &'static str, rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and small fixed constructions.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    /// Single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, &v) in row.iter().enumerate() {
                t.data[j * self.rows + i] = v;
            }
        }
        t
    }

    /// Copy of the rows listed in `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// Copy of the columns listed in `indices`, in order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (c, &j) in indices.iter().enumerate() {
                dst[c] = src[j];
            }
        }
        out
    }

    /// Columns `start..end`.
    pub fn column_range(&self, start: usize, end: usize) -> Matrix {
        let idx: Vec<usize> = (start..end).collect();
        self.select_columns(&idx)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "hcat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            let dst = out.row_mut(i);
            dst[..self.cols].copy_from_slice(self.row(i));
            dst[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(12) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(12) {
                write!(f, "{:>12.5e} ", self[(i, j)])?;
            }
            if self.cols > 12 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 12 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

fn frobenius(v: &[f64]) -> f64 {
    // scaled accumulation avoids overflow for large entries
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    frobenius(a)
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), c_row);
            }
        }
    }
    Ok(c)
}

/// `a · b` with compensated (Dot2) inner products, accurate to about
/// `ε·|a·b| + ε²·(|a|·|b|)` per entry.
pub fn matmul_compensated(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_compensated",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.cols, |i, j| {
        let (mut s, mut c) = (0.0_f64, 0.0_f64);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let p = aik * b[(k, j)];
            let p_err = aik.mul_add(b[(k, j)], -p);
            let t = s + p;
            let z = t - s;
            c += (s - (t - z)) + (p - z) + p_err;
            s = t;
        }
        s + c
    }))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki != 0.0 {
                axpy(aki, b_row, &mut c.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// Thin QR factors: `q` is m×n with orthonormal columns, `r` is n×n upper
/// triangular with a positive diagonal.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR of a tall matrix with full column rank.
///
/// The diagonal of `R` is made positive, which makes the factorization unique.
/// A column `j` with `|R_jj| < QR_RANK_TOL · ‖a‖_F` is reported as
/// [`LinalgError::RankDeficient`].
pub fn householder_qr(a: &Matrix) -> Result<QrFactors> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::NotTall { op: "householder_qr", rows: m, cols: n });
    }
    let a_norm = a.frobenius_norm();
    if a_norm == 0.0 {
        return Err(LinalgError::RankDeficient { column: 0, value: 0.0 });
    }

    // Work column-major: each column of `a` is a contiguous Vec.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r = Matrix::zeros(n, n);

    for k in 0..n {
        let x = &cols[k][k..];
        let alpha = norm2(x);
        let mut v = x.to_vec();
        // reflect x onto -sign(x0)·‖x‖·e1 to avoid cancellation
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let v_norm = norm2(&v);
        if v_norm > 0.0 {
            for vi in &mut v {
                *vi /= v_norm;
            }
        }
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let s = 2.0 * dot(&v, tail);
            axpy(-s, &v, tail);
        }
        for (i, col) in cols.iter().enumerate().skip(k) {
            r[(k, i)] = col[k];
        }
        reflectors.push(v);
    }

    for j in 0..n {
        if r[(j, j)].abs() < QR_RANK_TOL * a_norm {
            return Err(LinalgError::RankDeficient {
                column: j,
                value: r[(j, j)].abs(),
            });
        }
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let s = 2.0 * dot(v, tail);
            if s != 0.0 {
                axpy(-s, v, tail);
            }
        }
    }

    let mut q = Matrix::zeros(m, n);
    for (j, col) in q_cols.iter().enumerate() {
        let flip = r[(j, j)] < 0.0;
        for (i, &v) in col.iter().enumerate() {
            q[(i, j)] = if flip { -v } else { v };
        }
        if flip {
            for c in j..n {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    // entries below the diagonal were never written, so they are exact zeros
    Ok(QrFactors { q, r })
}

fn check_triangular_diag(r: &Matrix) -> Result<()> {
    let tol = TRIANGULAR_TOL * r.frobenius_norm();
    for j in 0..r.rows {
        let d = r[(j, j)];
        if !(d.abs() > tol) {
            return Err(LinalgError::SingularTriangular { index: j });
        }
    }
    Ok(())
}

/// Solves `r · x = b` by back substitution; `r` is square upper triangular.
pub fn solve_upper_triangular(r: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = r.rows;
    if r.cols != n || b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_upper_triangular",
            left: r.shape(),
            right: b.shape(),
        });
    }
    check_triangular_diag(r)?;
    let mut x = b.clone();
    let k = b.cols;
    for i in (0..n).rev() {
        let mut acc = x.row(i).to_vec();
        for j in i + 1..n {
            let rij = r[(i, j)];
            if rij != 0.0 {
                axpy(-rij, &x.data[j * k..(j + 1) * k], &mut acc);
            }
        }
        let d = r[(i, i)];
        for (dst, v) in x.row_mut(i).iter_mut().zip(acc) {
            *dst = v / d;
        }
    }
    Ok(x)
}

/// Solves `l · x = b` by forward substitution; `l` is square lower triangular.
pub fn solve_lower_triangular(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows;
    if l.cols != n || b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_lower_triangular",
            left: l.shape(),
            right: b.shape(),
        });
    }
    check_triangular_diag(l)?;
    let mut x = b.clone();
    let k = b.cols;
    for i in 0..n {
        let mut acc = x.row(i).to_vec();
        for j in 0..i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                axpy(-lij, &x.data[j * k..(j + 1) * k], &mut acc);
            }
        }
        let d = l[(i, i)];
        for (dst, v) in x.row_mut(i).iter_mut().zip(acc) {
            *dst = v / d;
        }
    }
    Ok(x)
}

/// Minimizer of `‖a·x − b‖_F` for tall, full-column-rank `a`, via QR.
/// Each column of `b` is an independent right-hand side.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "least_squares",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let QrFactors { q, r } = householder_qr(a)?;
    let qtb = matmul_tn(&q, b)?;
    solve_upper_triangular(&r, &qtb)
}

/// Minimum-norm solution of the underdetermined system `a·x = b` for wide
/// `a` with full row rank: with `aᵀ = QR`, `x = Q·R⁻ᵀ·b`.
pub fn min_norm_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "min_norm_solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let QrFactors { q, r } = householder_qr(&a.transpose())?;
    let y = solve_lower_triangular(&r.transpose(), b)?;
    matmul(&q, &y)
}

/// Thin SVD `a = u · diag(sigma) · vᵀ` truncated to the numerical rank.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub rank: usize,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        matmul_nt(&us, &self.v).expect("svd factor shapes are consistent")
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD.
///
/// Singular values `σ_j > rank_tol · σ_max` are kept; the rest are dropped
/// along with their vectors. Each left singular vector is signed so that its
/// largest-magnitude entry is positive.
pub fn jacobi_svd(a: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    if a.rows < a.cols {
        let t = jacobi_svd(&a.transpose(), rank_tol)?;
        // aᵀ = U Σ Vᵀ  ⇒  a = V Σ Uᵀ; re-sign so the new left vectors follow the convention
        let mut u = t.v;
        let mut v = t.u;
        normalize_signs(&mut u, &mut v);
        return Ok(SvdFactors {
            u,
            sigma: t.sigma,
            v,
            rank: t.rank,
        });
    }
    let (m, n) = a.shape();
    if a.max_abs() == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }

    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = w.iter().enumerate().map(|(j, c)| (norm2(c), j)).collect();
    order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let sigma_max = order[0].0;
    let cutoff = rank_tol.max(0.0) * sigma_max;
    let kept: Vec<(f64, usize)> = order.into_iter().filter(|(s, _)| *s > cutoff && *s > 0.0).collect();
    let rank = kept.len();

    let mut u = Matrix::zeros(m, rank);
    let mut v = Matrix::zeros(n, rank);
    let mut sigma = Vec::with_capacity(rank);
    for (c, &(s, j)) in kept.iter().enumerate() {
        sigma.push(s);
        for i in 0..m {
            u[(i, c)] = w[j][i] / s;
        }
        for i in 0..n {
            v[(i, c)] = vcols[j][i];
        }
    }
    normalize_signs(&mut u, &mut v);
    Ok(SvdFactors { u, sigma, v, rank })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn normalize_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols {
        let mut best = 0.0_f64;
        let mut best_val = 0.0;
        for i in 0..u.rows {
            let x = u[(i, j)];
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..u.rows {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
}

/// Eckart–Young: squared Frobenius error of the best rank-`k` approximation,
/// `Σ_{j>k} σ_j²`. Zero for the zero matrix or when `k ≥ rank`.
pub fn best_rank_k_error(a: &Matrix, k: usize) -> f64 {
    match jacobi_svd(a, 0.0) {
        Ok(svd) => svd.sigma.iter().skip(k).fold(0.0, |acc, s| acc + s * s),
        Err(_) => 0.0,
    }
}
