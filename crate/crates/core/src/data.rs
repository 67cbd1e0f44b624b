//! Operator datasets: finite-difference Darcy generators, splits, and the
//! on-disk dataset directory format.
//!
//! All generators work on the uniform tensor grid over `(-1, 1)²` with
//! `grid_n` nodes per axis. Node `(i, j)` sits at `(-1 + i·h, -1 + j·h)`,
//! `h = 2 / (grid_n - 1)`, and is stored at index `j·grid_n + i`.
//!
//! Dataset directory layout:
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.json` | shapes, generator tag + params, split |
//! | `x_sensors.bin` | `m_x × d_x` |
//! | `y_sensors.bin` | `m_y × d_y` |
//! | `F.bin` | `K × m_x` |
//! | `U.bin` | `m_y × K` |
//!
//! Blobs are row-major little-endian `f64` with no header.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("w = p² is negative ({value:e}) at node {node} of sample {sample}; the substitution is invalid in this regime")]
    NegativeSubstitution { sample: usize, node: usize, value: f64 },
    #[error("linear solver failed (relative residual {residual:e})")]
    SolverFailed { residual: f64 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Residual bound for every linear solve done here.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Grid and banded SPD solver

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(DataError::InvalidParameter(format!("grid_n must be >= 3, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn h(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        // exact endpoints, symmetric about zero
        if k == self.n - 1 {
            1.0
        } else {
            -1.0 + k as f64 * self.h()
        }
    }

    #[inline]
    pub fn point(&self, node: usize) -> (f64, f64) {
        (self.coord(node % self.n), self.coord(node / self.n))
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }

    /// All nodes as an `n² × 2` coordinate matrix.
    pub fn nodes(&self) -> Matrix {
        Matrix::from_fn(self.num_nodes(), 2, |k, c| {
            let (x, y) = self.point(k);
            if c == 0 {
                x
            } else {
                y
            }
        })
    }
}

/// Symmetric positive definite band matrix; stores `A[i][i-d]` for `d ≤ bw`.
struct BandedSpd {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

impl BandedSpd {
    fn new(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            a: vec![0.0; n * (bw + 1)],
        }
    }

    /// Adds `v` to `A[i][j]` (and implicitly `A[j][i]`).
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        assert!(d <= self.bw, "entry outside band");
        self.a[i * (self.bw + 1) + d] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        if d > self.bw {
            0.0
        } else {
            self.a[i * (self.bw + 1) + d]
        }
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.a[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for d in 1..=self.bw.min(i) {
                let v = row[d];
                if v != 0.0 {
                    y[i] += v * x[i - d];
                    y[i - d] += v * x[i];
                }
            }
        }
        y
    }

    /// Banded Cholesky `A = L Lᵀ`; returns `None` on a non-positive pivot.
    fn cholesky(&self) -> Option<BandedCholesky> {
        let w = self.bw + 1;
        let mut l = vec![0.0; self.n * w];
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let mut s = self.get(i, j);
                let k0 = j0.max(j.saturating_sub(self.bw));
                for k in k0..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return None;
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Some(BandedCholesky { n: self.n, bw: self.bw, l })
    }
}

struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w = self.bw + 1;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + w).min(self.n) {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        y
    }
}

fn solve_checked(a: &BandedSpd, factor: &BandedCholesky, b: &[f64]) -> Result<Vec<f64>> {
    let x = factor.solve(b);
    let ax = a.mul(&x);
    let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual = if den > 0.0 { num / den } else { num };
    if !(residual <= SOLVE_RESIDUAL_TOL) || x.iter().any(|v| !v.is_finite()) {
        return Err(DataError::SolverFailed { residual });
    }
    Ok(x)
}

/// Factored 5-point Dirichlet Laplacian on the interior of a [`Grid`];
/// reusable across right-hand sides.
pub struct PoissonSolver {
    grid: Grid,
    matrix: BandedSpd,
    factor: BandedCholesky,
}

impl PoissonSolver {
    pub fn new(grid_n: usize) -> Result<Self> {
        let grid = Grid::new(grid_n)?;
        let m = grid_n - 2;
        // unknowns ordered row-major over the interior, scaled by h² so A = -h²Δ_h
        let mut a = BandedSpd::new(m * m, m);
        for jj in 0..m {
            for ii in 0..m {
                let r = jj * m + ii;
                a.add(r, r, 4.0);
                if ii > 0 {
                    a.add(r, r - 1, -1.0);
                }
                if jj > 0 {
                    a.add(r, r - m, -1.0);
                }
            }
        }
        let factor = a.cholesky().ok_or(DataError::SolverFailed { residual: f64::INFINITY })?;
        Ok(Self { grid, matrix: a, factor })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Solves `Δ_h w = f` in the interior with `w = boundary` on ∂Ω.
    /// `f` and `boundary` are node-indexed arrays over the full grid; values of
    /// `f` on the boundary and of `boundary` in the interior are ignored.
    pub fn solve(&self, f: &[f64], boundary: &[f64]) -> Result<Vec<f64>> {
        let g = self.grid;
        let n = g.n;
        let m = n - 2;
        let h2 = g.h() * g.h();
        let mut rhs = vec![0.0; m * m];
        for jj in 0..m {
            for ii in 0..m {
                let (i, j) = (ii + 1, jj + 1);
                let mut b = -h2 * f[g.index(i, j)];
                for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                    if g.is_boundary(ni, nj) {
                        b += boundary[g.index(ni, nj)];
                    }
                }
                rhs[jj * m + ii] = b;
            }
        }
        let interior = solve_checked(&self.matrix, &self.factor, &rhs)?;
        let mut w = vec![0.0; g.num_nodes()];
        for j in 0..n {
            for i in 0..n {
                let k = g.index(i, j);
                w[k] = if g.is_boundary(i, j) {
                    boundary[k]
                } else {
                    interior[(j - 1) * m + (i - 1)]
                };
            }
        }
        Ok(w)
    }
}

/// Solves `Δw = f` on `(-1,1)²` with `w = g` on the boundary using the
/// 5-point stencil; returns node values in grid order.
pub fn solve_poisson_fd(
    grid_n: usize,
    f: impl Fn(f64, f64) -> f64,
    g: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let solver = PoissonSolver::new(grid_n)?;
    let grid = solver.grid();
    let fv: Vec<f64> = (0..grid.num_nodes()).map(|k| {
        let (x, y) = grid.point(k);
        f(x, y)
    }).collect();
    let gv: Vec<f64> = (0..grid.num_nodes()).map(|k| {
        let (x, y) = grid.point(k);
        g(x, y)
    }).collect();
    solver.solve(&fv, &gv)
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub seed: Option<u64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn all_train(k: usize) -> Self {
        Self {
            seed: None,
            train: (0..k).collect(),
            test: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMeta {
    pub generator: String,
    pub params: serde_json::Value,
}

/// Paired input/output samples of an operator.
///
/// Column `k` of `u_matrix` is the output sampled at `y_sensors`; row `k` of
/// `f_matrix` is the matching input sampled at `x_sensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    pub name: String,
    pub x_sensors: Matrix,
    pub y_sensors: Matrix,
    pub f_matrix: Matrix,
    pub u_matrix: Matrix,
    pub split: Split,
    pub meta: GeneratorMeta,
}

impl OperatorDataset {
    pub fn new(
        name: impl Into<String>,
        x_sensors: Matrix,
        y_sensors: Matrix,
        f_matrix: Matrix,
        u_matrix: Matrix,
        meta: GeneratorMeta,
    ) -> Result<Self> {
        let k = f_matrix.rows();
        let ds = Self {
            name: name.into(),
            x_sensors,
            y_sensors,
            f_matrix,
            u_matrix,
            split: Split::all_train(k),
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn k(&self) -> usize {
        self.f_matrix.rows()
    }

    pub fn m_x(&self) -> usize {
        self.f_matrix.cols()
    }

    pub fn m_y(&self) -> usize {
        self.u_matrix.rows()
    }

    pub fn d_x(&self) -> usize {
        self.x_sensors.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y_sensors.cols()
    }

    /// Checks shape consistency, split coverage, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::Inconsistent(msg));
        if self.x_sensors.rows() != self.m_x() {
            return bad(format!("x_sensors has {} rows but m_x = {}", self.x_sensors.rows(), self.m_x()));
        }
        if self.y_sensors.rows() != self.m_y() {
            return bad(format!("y_sensors has {} rows but m_y = {}", self.y_sensors.rows(), self.m_y()));
        }
        if self.u_matrix.cols() != self.k() {
            return bad(format!("U has {} columns but K = {}", self.u_matrix.cols(), self.k()));
        }
        let mut seen = vec![false; self.k()];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= self.k() || seen[i] {
                return bad(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return bad("split does not cover every sample".into());
        }
        for (what, m) in [
            ("x_sensors", &self.x_sensors),
            ("y_sensors", &self.y_sensors),
            ("F", &self.f_matrix),
            ("U", &self.u_matrix),
        ] {
            if !m.is_finite() {
                return bad(format!("{what} contains non-finite values"));
            }
        }
        Ok(())
    }

    /// Samples `indices` (in order) as a standalone dataset, all marked train.
    pub fn subset(&self, indices: &[usize]) -> OperatorDataset {
        OperatorDataset {
            name: self.name.clone(),
            x_sensors: self.x_sensors.clone(),
            y_sensors: self.y_sensors.clone(),
            f_matrix: self.f_matrix.select_rows(indices),
            u_matrix: self.u_matrix.select_columns(indices),
            split: Split::all_train(indices.len()),
            meta: self.meta.clone(),
        }
    }

    pub fn train_subset(&self) -> OperatorDataset {
        self.subset(&self.split.train)
    }

    pub fn test_subset(&self) -> OperatorDataset {
        self.subset(&self.split.test)
    }

    /// Keeps `m_y` output sensors drawn uniformly without replacement.
    pub fn subsample_output_sensors(&self, m_y: usize, seed: u64) -> Result<OperatorDataset> {
        if m_y == 0 || m_y > self.m_y() {
            return Err(DataError::InvalidParameter(format!(
                "cannot draw {m_y} output sensors from {}",
                self.m_y()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.m_y(), m_y).into_vec();
        idx.sort_unstable();
        let mut out = self.clone();
        out.y_sensors = self.y_sensors.select_rows(&idx);
        out.u_matrix = self.u_matrix.select_rows(&idx);
        Ok(out)
    }

    /// Keeps `m_x` input sensors drawn uniformly without replacement.
    pub fn subsample_input_sensors(&self, m_x: usize, seed: u64) -> Result<OperatorDataset> {
        if m_x == 0 || m_x > self.m_x() {
            return Err(DataError::InvalidParameter(format!(
                "cannot draw {m_x} input sensors from {}",
                self.m_x()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.m_x(), m_x).into_vec();
        idx.sort_unstable();
        let mut out = self.clone();
        out.x_sensors = self.x_sensors.select_rows(&idx);
        out.f_matrix = self.f_matrix.select_columns(&idx);
        Ok(out)
    }
}

/// Random train/test partition: `round(fraction·K)` training samples,
/// clamped so both sides are nonempty when `K ≥ 2`.
pub fn split_dataset(data: &OperatorDataset, train_fraction: f64, seed: u64) -> Result<OperatorDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let k = data.k();
    let mut n_train = (train_fraction * k as f64).round() as usize;
    if k >= 2 {
        n_train = n_train.clamp(1, k - 1);
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let mut out = data.clone();
    out.split = Split {
        seed: Some(seed),
        train,
        test,
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generators

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

fn sqrt_substitution(w: &[f64], sample: usize, strict: bool) -> Result<Vec<f64>> {
    w.iter()
        .enumerate()
        .map(|(node, &v)| {
            if v < 0.0 || (strict && v == 0.0) {
                Err(DataError::NegativeSubstitution { sample, node, value: v })
            } else {
                Ok(v.sqrt())
            }
        })
        .collect()
}

/// Solution of `-∇·(κ p ∇p) = f` with `p = g` on ∂Ω for constant data.
///
/// Since `∇·(p∇p) = ½Δ(p²)`, `w = p²` satisfies the linear problem
/// `Δw = -2f/κ`, `w = g²` on ∂Ω, and `p = √w`.
pub struct NonlinearDarcy {
    solver: PoissonSolver,
}

impl NonlinearDarcy {
    pub fn new(grid_n: usize) -> Result<Self> {
        Ok(Self {
            solver: PoissonSolver::new(grid_n)?,
        })
    }

    pub fn grid(&self) -> Grid {
        self.solver.grid()
    }

    /// `w = p²` for source `f`, conductivity `kappa`, boundary values `g_sq = g²`.
    pub fn solve_squared(&self, f: f64, kappa: f64, g_sq: &[f64]) -> Result<Vec<f64>> {
        let rhs = vec![-2.0 * f / kappa; self.grid().num_nodes()];
        self.solver.solve(&rhs, g_sq)
    }
}

fn example1_boundary(grid: Grid) -> Vec<f64> {
    (0..grid.num_nodes())
        .map(|k| {
            let (x, _) = grid.point(k);
            x.cos().powi(2)
        })
        .collect()
}

/// One forward sample of the first Darcy example: `f = 1`, `g = cos(x)`,
/// conductivity `κp` with constant `κ`.
pub fn example1_solution(grid_n: usize, kappa: f64) -> Result<Vec<f64>> {
    let darcy = NonlinearDarcy::new(grid_n)?;
    let w = darcy.solve_squared(1.0, kappa, &example1_boundary(darcy.grid()))?;
    sqrt_substitution(&w, 0, false)
}

/// Forward problem `κ ↦ p` for constant `κ = β`; `m_x = 1`, outputs at every node.
pub fn gen_example1(betas: &[f64], grid_n: usize) -> Result<OperatorDataset> {
    if betas.is_empty() {
        return Err(DataError::InvalidParameter("need at least one beta".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 1.0 && **b <= 1000.0)) {
        return Err(DataError::InvalidParameter(format!("beta {b} outside [1, 1000]")));
    }
    let darcy = NonlinearDarcy::new(grid_n)?;
    let grid = darcy.grid();
    let g_sq = example1_boundary(grid);
    let mut u = Matrix::zeros(grid.num_nodes(), betas.len());
    for (k, &beta) in betas.iter().enumerate() {
        let w = darcy.solve_squared(1.0, beta, &g_sq)?;
        u.set_column(k, &sqrt_substitution(&w, k, false)?);
    }
    OperatorDataset::new(
        "example1",
        Matrix::from_rows(&[[0.0, 0.0]]),
        grid.nodes(),
        Matrix::column_vector(betas),
        u,
        GeneratorMeta {
            generator: "ex1".into(),
            params: serde_json::json!({ "grid_n": grid_n, "betas": betas }),
        },
    )
}

/// Piecewise conductivity of the inverse example: `β` on the closed disk of
/// radius 0.5, `1` elsewhere.
pub fn example2_kappa(x: f64, y: f64, beta: f64) -> f64 {
    if x * x + y * y <= 0.25 {
        beta
    } else {
        1.0
    }
}

/// Linear Darcy problem `-∇·(κ∇p) = 0` with `p = 0` on the top edge,
/// outward flux `-κ∇p·n = 1` on the bottom edge, and no flux on the sides.
///
/// Vertex-centred finite volumes: boundary nodes own half (corner: quarter)
/// cells, face conductivities are harmonic means of the node values.
pub fn solve_mixed_darcy(grid_n: usize, kappa: &[f64]) -> Result<Vec<f64>> {
    let grid = Grid::new(grid_n)?;
    let n = grid.n;
    let h = grid.h();
    if kappa.len() != grid.num_nodes() || kappa.iter().any(|k| !(*k > 0.0)) {
        return Err(DataError::InvalidParameter("conductivity must be positive at every node".into()));
    }
    // unknowns: rows j = 0..n-2 (top row is Dirichlet)
    let n_unknown = n * (n - 1);
    let mut a = BandedSpd::new(n_unknown, n);
    let mut b = vec![0.0; n_unknown];
    let harmonic = |p: usize, q: usize| 2.0 * kappa[p] * kappa[q] / (kappa[p] + kappa[q]);
    let half_if = |edge: bool| if edge { 0.5 * h } else { h };

    for j in 0..n - 1 {
        for i in 0..n {
            let r = j * n + i;
            let node = grid.index(i, j);
            let wx = half_if(i == 0 || i == n - 1);
            let wy = half_if(j == 0);
            // east face, length wy
            if i + 1 < n {
                let c = harmonic(node, grid.index(i + 1, j)) * wy / h;
                a.add(r, r, c);
                a.add(r + 1, r + 1, c);
                a.add(r, r + 1, -c);
            }
            // north face, length wx
            let north = grid.index(i, j + 1);
            let c = harmonic(node, north) * wx / h;
            a.add(r, r, c);
            if j + 1 < n - 1 {
                let rn = r + n;
                a.add(rn, rn, c);
                a.add(r, rn, -c);
            }
            if j == 0 {
                b[r] -= wx;
            }
        }
    }
    let factor = a.cholesky().ok_or(DataError::SolverFailed { residual: f64::INFINITY })?;
    let p = solve_checked(&a, &factor, &b)?;
    let mut out = vec![0.0; grid.num_nodes()];
    out[..n_unknown].copy_from_slice(&p);
    Ok(out)
}

/// Inverse problem `p ↦ κ`: inputs are mixed-BC Darcy solutions at every
/// node, outputs are the piecewise conductivity at the same nodes.
pub fn gen_example2(betas: &[f64], grid_n: usize) -> Result<OperatorDataset> {
    if betas.is_empty() {
        return Err(DataError::InvalidParameter("need at least one beta".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.01 && **b <= 10.0)) {
        return Err(DataError::InvalidParameter(format!("beta {b} outside [0.01, 10]")));
    }
    let grid = Grid::new(grid_n)?;
    let nodes = grid.nodes();
    let mut f = Matrix::zeros(betas.len(), grid.num_nodes());
    let mut u = Matrix::zeros(grid.num_nodes(), betas.len());
    for (k, &beta) in betas.iter().enumerate() {
        let kappa: Vec<f64> = (0..grid.num_nodes())
            .map(|node| {
                let (x, y) = grid.point(node);
                example2_kappa(x, y, beta)
            })
            .collect();
        let p = solve_mixed_darcy(grid_n, &kappa)?;
        f.row_mut(k).copy_from_slice(&p);
        u.set_column(k, &kappa);
    }
    OperatorDataset::new(
        "example2",
        nodes.clone(),
        nodes,
        f,
        u,
        GeneratorMeta {
            generator: "ex2".into(),
            params: serde_json::json!({ "grid_n": grid_n, "betas": betas }),
        },
    )
}

/// One sample of the multi-input example: constants `(f, κ, g)`.
pub fn example3_solution(grid_n: usize, f: f64, kappa: f64, g: f64) -> Result<Vec<f64>> {
    let darcy = NonlinearDarcy::new(grid_n)?;
    let g_sq = vec![g * g; darcy.grid().num_nodes()];
    let w = darcy.solve_squared(f, kappa, &g_sq)?;
    sqrt_substitution(&w, 0, true)
}

/// `k` distinct triplets `(i/10, j/10, l/10)`, `i, j, l ∈ 1..=100`, drawn
/// without replacement from the million-point lattice.
pub fn example3_triplets(k: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    const SIDE: usize = 100;
    if k == 0 || k > SIDE * SIDE * SIDE {
        return Err(DataError::InvalidParameter(format!("cannot draw {k} triplets")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, SIDE * SIDE * SIDE, k).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|p| {
            let i = p / (SIDE * SIDE) + 1;
            let j = (p / SIDE) % SIDE + 1;
            let l = p % SIDE + 1;
            [i as f64 / 10.0, j as f64 / 10.0, l as f64 / 10.0]
        })
        .collect())
}

/// Map `(f, κ, g) ↦ p`; `m_x = 3` (one coefficient per input), outputs at every node.
pub fn gen_example3(triplets: &[[f64; 3]], grid_n: usize) -> Result<OperatorDataset> {
    if triplets.is_empty() {
        return Err(DataError::InvalidParameter("need at least one triplet".into()));
    }
    if let Some(t) = triplets.iter().find(|t| t.iter().any(|v| !(*v >= 0.1 && *v <= 10.0))) {
        return Err(DataError::InvalidParameter(format!("triplet {t:?} outside [0.1, 10]^3")));
    }
    let darcy = NonlinearDarcy::new(grid_n)?;
    let grid = darcy.grid();
    let mut f = Matrix::zeros(triplets.len(), 3);
    let mut u = Matrix::zeros(grid.num_nodes(), triplets.len());
    let mut g_sq = vec![0.0; grid.num_nodes()];
    for (k, &[src, kappa, g]) in triplets.iter().enumerate() {
        g_sq.iter_mut().for_each(|v| *v = g * g);
        let w = darcy.solve_squared(src, kappa, &g_sq)?;
        u.set_column(k, &sqrt_substitution(&w, k, true)?);
        f.row_mut(k).copy_from_slice(&[src, kappa, g]);
    }
    OperatorDataset::new(
        "example3",
        Matrix::from_rows(&[[0.0], [1.0], [2.0]]),
        grid.nodes(),
        f,
        u,
        GeneratorMeta {
            generator: "ex3".into(),
            params: serde_json::json!({ "grid_n": grid_n, "num_triplets": triplets.len() }),
        },
    )
}

// ---------------------------------------------------------------------------
// Dataset I/O

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    d_x: usize,
    d_y: usize,
    m_x: usize,
    m_y: usize,
    #[serde(rename = "K")]
    k: usize,
    generator: String,
    params: serde_json::Value,
    dtype: String,
    split: Split,
}

pub const DTYPE_F64LE: &str = "f64le";

pub fn matrix_to_le_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_le_bytes(bytes: &[u8], rows: usize, cols: usize) -> std::result::Result<Matrix, String> {
    let expected = rows * cols * 8;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

fn read_blob(dir: &Path, file: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(dir.join(file))?;
    matrix_from_le_bytes(&bytes, rows, cols).map_err(|e| DataError::Corrupt(format!("{file}: {e}")))
}

pub fn save_dataset(data: &OperatorDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    data.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        name: data.name.clone(),
        d_x: data.d_x(),
        d_y: data.d_y(),
        m_x: data.m_x(),
        m_y: data.m_y(),
        k: data.k(),
        generator: data.meta.generator.clone(),
        params: data.meta.params.clone(),
        dtype: DTYPE_F64LE.into(),
        split: data.split.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("x_sensors.bin"), matrix_to_le_bytes(&data.x_sensors))?;
    fs::write(dir.join("y_sensors.bin"), matrix_to_le_bytes(&data.y_sensors))?;
    fs::write(dir.join("F.bin"), matrix_to_le_bytes(&data.f_matrix))?;
    fs::write(dir.join("U.bin"), matrix_to_le_bytes(&data.u_matrix))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<OperatorDataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Corrupt(format!("manifest.json: {e}")))?;
    if manifest.dtype != DTYPE_F64LE {
        return Err(DataError::Corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let ds = OperatorDataset {
        name: manifest.name,
        x_sensors: read_blob(dir, "x_sensors.bin", manifest.m_x, manifest.d_x)?,
        y_sensors: read_blob(dir, "y_sensors.bin", manifest.m_y, manifest.d_y)?,
        f_matrix: read_blob(dir, "F.bin", manifest.k, manifest.m_x)?,
        u_matrix: read_blob(dir, "U.bin", manifest.m_y, manifest.k)?,
        split: manifest.split,
        meta: GeneratorMeta {
            generator: manifest.generator,
            params: manifest.params,
        },
    };
    ds.validate().map_err(|e| DataError::Corrupt(e.to_string()))?;
    Ok(ds)
}

/// Writes a matrix as headerless CSV, one row per line.
pub fn export_csv(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn grid_rejects_too_small() {
        assert!(Grid::new(2).is_err());
        assert!(PoissonSolver::new(2).is_err());
        let g = Grid::new(5).unwrap();
        assert_eq!(g.point(0), (-1.0, -1.0));
        assert_eq!(g.point(24), (1.0, 1.0));
        assert_eq!(g.point(12), (0.0, 0.0));
    }

    #[test]
    fn poisson_constant_and_affine_are_exact() {
        let w = solve_poisson_fd(9, |_, _| 0.0, |_, _| 1.0).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-13));

        let grid = Grid::new(9).unwrap();
        let w = solve_poisson_fd(9, |_, _| 0.0, |x, _| x).unwrap();
        let xs: Vec<f64> = (0..grid.num_nodes()).map(|k| grid.point(k).0).collect();
        assert!(max_abs_diff(&w, &xs) < 1e-13);
    }

    #[test]
    fn poisson_exact_on_quadratic() {
        // w = x², Δw = 2
        let grid = Grid::new(11).unwrap();
        let w = solve_poisson_fd(11, |_, _| 2.0, |x, _| x * x).unwrap();
        let exact: Vec<f64> = (0..grid.num_nodes()).map(|k| grid.point(k).0.powi(2)).collect();
        assert!(max_abs_diff(&w, &exact) <= 1e-10);
    }

    #[test]
    fn banded_cholesky_matches_dense_solve() {
        let mut a = BandedSpd::new(5, 2);
        for i in 0..5 {
            a.add(i, i, 4.0 + i as f64);
            if i >= 1 {
                a.add(i, i - 1, -1.0);
            }
            if i >= 2 {
                a.add(i, i - 2, 0.5);
            }
        }
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let x = solve_checked(&a, &a.cholesky().unwrap(), &b).unwrap();
        let ax = a.mul(&x);
        assert!(max_abs_diff(&ax, &b) < 1e-13);
    }

    #[test]
    fn example1_large_beta_tends_to_harmonic_extension() {
        let grid_n = 17;
        let darcy = NonlinearDarcy::new(grid_n).unwrap();
        let g_sq = example1_boundary(darcy.grid());
        let w_big = darcy.solve_squared(1.0, 1e6, &g_sq).unwrap();
        let harmonic = solve_poisson_fd(grid_n, |_, _| 0.0, |x, _| x.cos().powi(2)).unwrap();
        assert!(max_abs_diff(&w_big, &harmonic) <= 1e-5);
    }

    #[test]
    fn constant_boundary_without_source_is_constant() {
        let darcy = NonlinearDarcy::new(9).unwrap();
        let w = darcy.solve_squared(0.0, 3.0, &vec![2.25; 81]).unwrap();
        assert!(w.iter().all(|v| (v.sqrt() - 1.5).abs() < 1e-13));
    }

    #[test]
    fn example1_shapes() {
        let ds = gen_example1(&[1.0, 10.0, 100.0], 9).unwrap();
        assert_eq!((ds.k(), ds.m_x(), ds.m_y(), ds.d_y()), (3, 1, 81, 2));
        assert_eq!(ds.f_matrix.column(0), vec![1.0, 10.0, 100.0]);
        assert!(gen_example1(&[0.5], 9).is_err());
    }

    #[test]
    fn example2_conductivity_values() {
        assert_eq!(example2_kappa(0.0, 0.0, 3.5), 3.5);
        assert_eq!(example2_kappa(0.9, 0.9, 3.5), 1.0);
        let ds = gen_example2(&[1.0, 4.0], 9).unwrap();
        assert!(ds.u_matrix.column(0).iter().all(|&k| k == 1.0));
        let grid = Grid::new(9).unwrap();
        let centre = grid.index(4, 4);
        assert_eq!(ds.u_matrix[(centre, 1)], 4.0);
        assert_eq!(ds.m_x(), 81);
        assert!(gen_example2(&[20.0], 9).is_err());
    }

    #[test]
    fn example2_bottom_flux_is_unit() {
        for grid_n in [17, 33] {
            let grid = Grid::new(grid_n).unwrap();
            let kappa: Vec<f64> = (0..grid.num_nodes())
                .map(|k| {
                    let (x, y) = grid.point(k);
                    example2_kappa(x, y, 5.0)
                })
                .collect();
            let p = solve_mixed_darcy(grid_n, &kappa).unwrap();
            let h = grid.h();
            let fluxes: Vec<f64> = (1..grid_n - 1)
                .map(|i| kappa[grid.index(i, 0)] * (p[grid.index(i, 1)] - p[grid.index(i, 0)]) / h)
                .collect();
            let worst = fluxes.iter().fold(0.0_f64, |m, f| m.max((f - 1.0).abs()));
            assert!(worst <= 2.0 * h, "grid {grid_n}: worst flux deviation {worst}");
            // top row is Dirichlet zero
            assert!((0..grid_n).all(|i| p[grid.index(i, grid_n - 1)] == 0.0));
        }
    }

    #[test]
    fn example3_small_source_limit_and_scaling() {
        let p = example3_solution(9, 1e-8, 1.0, 2.0).unwrap();
        assert!(p.iter().all(|v| (v - 2.0).abs() <= 1e-7));

        let a = example3_solution(9, 0.7, 1.3, 2.0).unwrap();
        let b = example3_solution(9, 0.7 * 4.0, 1.3 * 4.0, 2.0).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-10);
    }

    #[test]
    fn example3_triplets_are_on_lattice() {
        let t = example3_triplets(50, 3).unwrap();
        assert_eq!(t.len(), 50);
        for v in t.iter().flatten() {
            let scaled = v * 10.0;
            assert!((scaled - scaled.round()).abs() < 1e-9 && (1.0..=100.0).contains(&scaled.round()));
        }
        assert_eq!(t, example3_triplets(50, 3).unwrap());
        let ds = gen_example3(&t[..4], 9).unwrap();
        assert_eq!((ds.m_x(), ds.m_y(), ds.k()), (3, 81, 4));
        assert!(gen_example3(&[[0.05, 1.0, 1.0]], 9).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = gen_example1(&linspace(1.0, 1000.0, 1000), 3).unwrap();
        let s = split_dataset(&ds, 0.9, 4).unwrap();
        assert_eq!((s.split.train.len(), s.split.test.len()), (900, 100));
        assert_eq!(s.split, split_dataset(&ds, 0.9, 4).unwrap().split);

        let small = gen_example1(&linspace(1.0, 10.0, 10), 3).unwrap();
        let s = split_dataset(&small, 0.5, 1).unwrap();
        assert_eq!((s.split.train.len(), s.split.test.len()), (5, 5));
        let mut all: Vec<usize> = s.split.train.iter().chain(&s.split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(&small, 1.0, 1).is_err());
    }

    #[test]
    fn output_subsampling_keeps_columns_aligned() {
        let ds = gen_example1(&[1.0, 2.0], 9).unwrap();
        let sub = ds.subsample_output_sensors(20, 7).unwrap();
        assert_eq!(sub.m_y(), 20);
        for r in 0..20 {
            let y = sub.y_sensors.row(r);
            let orig = (0..ds.m_y()).find(|&i| ds.y_sensors.row(i) == y).unwrap();
            assert_eq!(sub.u_matrix.row(r), ds.u_matrix.row(orig));
        }
        assert!(ds.subsample_output_sensors(100, 7).is_err());
    }
}
