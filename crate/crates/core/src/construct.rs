//! Explicit deep ReLU trunk that interpolates prescribed values at the output
//! sensors, and the zero-training-loss certificate built on top of it.
//!
//! Sensors are projected onto a separating direction so that projected
//! values are at least 2 apart. Each sensor then gets its own hat
//! `N_{a,b}` with `a = ỹ_j − ¼`, `b = ỹ_j + ¼`; the supports
//! `[a − ½, b + ½]` are pairwise disjoint, so each hat is 1 at its own sensor
//! and 0 at every other one. Blocks are chained by merging the last affine
//! map of one block with the first affine map of the next.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::OperatorDataset;
use crate::deeponet::{monolithic_loss, DeepONetModel};
use crate::error::{Error, Result};
use crate::linalg::{best_rank_k_error, dot, householder_qr, jacobi_svd, matmul, matmul_tn, Matrix, DEFAULT_RANK_TOL};
use crate::nn::{Activation, InitScheme, Mlp};
use crate::train::{orthonormalize, BranchSolver, TrainConfig, train_branch_step2};

const DIRECTION_TRIALS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatParams {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatingDirection {
    pub v: Vec<f64>,
    pub scale: f64,
}

impl SeparatingDirection {
    /// `ỹ = scale · vᵀy`
    pub fn project(&self, y: &[f64]) -> f64 {
        self.scale * dot(&self.v, y)
    }

    /// The scaled direction `ṽ = scale · v`.
    pub fn scaled(&self) -> Vec<f64> {
        self.v.iter().map(|x| x * self.scale).collect()
    }
}

fn check_distinct(y: &Matrix) -> Result<()> {
    for i in 0..y.rows() {
        for j in i + 1..y.rows() {
            if y.row(i) == y.row(j) {
                return Err(Error::DuplicateSensor { first: i, second: j });
            }
        }
    }
    Ok(())
}

fn min_projected_gap(y: &Matrix, v: &[f64]) -> f64 {
    let mut p: Vec<f64> = (0..y.rows()).map(|i| dot(v, y.row(i))).collect();
    p.sort_by(f64::total_cmp);
    p.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Best of 1024 random unit directions by minimum projected gap, rescaled so
/// the closest projected pair is exactly 2 apart.
pub fn find_separating_direction(y_sensors: &Matrix, seed: u64) -> Result<SeparatingDirection> {
    check_distinct(y_sensors)?;
    let d = y_sensors.cols();
    if y_sensors.rows() < 2 {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        return Ok(SeparatingDirection { v, scale: 1.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..DIRECTION_TRIALS {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let gap = min_projected_gap(y_sensors, &v);
        if best.as_ref().is_none_or(|(g, _)| gap > *g) {
            best = Some((gap, v));
        }
        if d == 1 {
            break;
        }
    }
    match best {
        Some((gap, v)) if gap > 0.0 => Ok(SeparatingDirection { v, scale: 2.0 / gap }),
        _ => Err(Error::Config("no separating direction found".into())),
    }
}

/// Three-layer ReLU hat: 1 on `[a, b]`, 0 outside `(a − ½, b + ½)`, linear between.
pub fn hat_network(h: HatParams) -> Result<Mlp> {
    if !(h.a < h.b) {
        return Err(Error::Config(format!("hat needs a < b, got a = {}, b = {}", h.a, h.b)));
    }
    Ok(Mlp::from_layers(
        vec![
            (Matrix::from_rows(&[[-2.0], [2.0]]), vec![2.0 * h.a, -2.0 * h.b]),
            (Matrix::from_rows(&[[-1.0, 0.0], [0.0, -1.0]]), vec![1.0, 1.0]),
            (Matrix::from_rows(&[[1.0, 1.0]]), vec![-1.0]),
        ],
        Activation::Relu,
    )?)
}

type Affine = (Matrix, Vec<f64>);

/// `x ↦ outer(inner(x))`
fn compose(outer: &Affine, inner: &Affine) -> Affine {
    let w = matmul(&outer.0, &inner.0).expect("block shapes chain");
    let mut b = outer.1.clone();
    for (i, bi) in b.iter_mut().enumerate() {
        *bi += dot(outer.0.row(i), &inner.1);
    }
    (w, b)
}

/// First block: `y ↦ (ỹ, c·N_{a,b}(ỹ))` as three affine maps.
fn first_block(v_tilde: &[f64], h: HatParams, c: &[f64]) -> [Affine; 3] {
    let d = v_tilde.len();
    let r = c.len();
    let l1 = Matrix::from_fn(4, d, |i, j| [-2.0, 2.0, 1.0, -1.0][i] * v_tilde[j]);
    let b1 = vec![2.0 * h.a, -2.0 * h.b, 0.0, 0.0];
    let l2 = Matrix::diag(&[-1.0, -1.0, 1.0, 1.0]);
    let b2 = vec![1.0, 1.0, 0.0, 0.0];
    let mut l3 = Matrix::zeros(r + 1, 4);
    l3[(0, 2)] = 1.0;
    l3[(0, 3)] = -1.0;
    for k in 0..r {
        l3[(k + 1, 0)] = c[k];
        l3[(k + 1, 1)] = c[k];
    }
    let mut b3 = vec![0.0];
    b3.extend(c.iter().map(|x| -x));
    [(l1, b1), (l2, b2), (l3, b3)]
}

/// Later block: `(ỹ, z) ↦ (ỹ, z + c·N_{a,b}(ỹ))`, width `2r + 4`.
fn middle_block(h: HatParams, c: &[f64]) -> [Affine; 3] {
    let r = c.len();
    let width = 2 * r + 4;
    let mut l1 = Matrix::zeros(width, r + 1);
    l1[(0, 0)] = -2.0;
    l1[(1, 0)] = 2.0;
    l1[(2, 0)] = 1.0;
    l1[(3, 0)] = -1.0;
    for k in 0..r {
        l1[(4 + 2 * k, k + 1)] = 1.0;
        l1[(5 + 2 * k, k + 1)] = -1.0;
    }
    let mut b1 = vec![0.0; width];
    b1[0] = 2.0 * h.a;
    b1[1] = -2.0 * h.b;
    let mut diag = vec![1.0; width];
    diag[0] = -1.0;
    diag[1] = -1.0;
    let l2 = Matrix::diag(&diag);
    let mut b2 = vec![0.0; width];
    b2[0] = 1.0;
    b2[1] = 1.0;
    let mut l3 = Matrix::zeros(r + 1, width);
    l3[(0, 2)] = 1.0;
    l3[(0, 3)] = -1.0;
    for k in 0..r {
        l3[(k + 1, 0)] = c[k];
        l3[(k + 1, 1)] = c[k];
        l3[(k + 1, 4 + 2 * k)] = 1.0;
        l3[(k + 1, 5 + 2 * k)] = -1.0;
    }
    let mut b3 = vec![0.0];
    b3.extend(c.iter().map(|x| -x));
    [(l1, b1), (l2, b2), (l3, b3)]
}

/// ReLU network with `φ₀(y_i) = (values_i, 0_{n_out − r})` at every sensor,
/// where `values` is `m_y × r`. Architecture `(d_y, 4, 4, ñ, …, ñ, n_out)`
/// with `ñ = 2r + 4` and `2m_y + 1` affine layers.
pub fn build_value_interpolating_trunk(
    y_sensors: &Matrix,
    values: &Matrix,
    n_out: usize,
    direction: &SeparatingDirection,
) -> Result<Mlp> {
    let (m_y, r) = values.shape();
    if m_y != y_sensors.rows() || m_y == 0 {
        return Err(Error::Shape(format!("values have {m_y} rows, sensors {}", y_sensors.rows())));
    }
    if r == 0 || r > n_out {
        return Err(Error::Shape(format!("cannot carry {r} channels into {n_out} outputs")));
    }
    let v_tilde = direction.scaled();
    let hat = |i: usize| {
        let t = direction.project(y_sensors.row(i));
        HatParams { a: t - 0.25, b: t + 0.25 }
    };

    let mut layers: Vec<Affine> = Vec::with_capacity(2 * m_y + 1);
    let [f1, f2, mut pending] = first_block(&v_tilde, hat(0), values.row(0));
    layers.push(f1);
    layers.push(f2);
    for i in 1..m_y {
        let [g1, g2, g3] = middle_block(hat(i), values.row(i));
        layers.push(compose(&g1, &pending));
        layers.push(g2);
        pending = g3;
    }
    // selector [0 | I_r ; 0] drops ỹ and pads with zero outputs
    let selector = (
        Matrix::from_fn(n_out, r + 1, |i, j| if i < r && j == i + 1 { 1.0 } else { 0.0 }),
        vec![0.0; n_out],
    );
    layers.push(compose(&selector, &pending));
    Ok(Mlp::from_layers(layers, Activation::Relu)?)
}

pub struct InterpolatingTrunk {
    pub trunk: Mlp,
    pub a_star: Matrix,
    pub direction: SeparatingDirection,
    /// Numerical rank of `U`.
    pub rank: usize,
    /// `min(N, rank)`
    pub r_tilde: usize,
}

/// Trunk and coefficients with `Φ(μ*)A*` equal to the best rank-`min(N, r)`
/// approximation of `U` on the sensors.
pub fn build_interpolating_trunk(y_sensors: &Matrix, u: &Matrix, n_width: usize, seed: u64) -> Result<InterpolatingTrunk> {
    if n_width == 0 {
        return Err(Error::Config("N must be >= 1".into()));
    }
    if u.rows() != y_sensors.rows() {
        return Err(Error::Shape(format!("U has {} rows, sensors {}", u.rows(), y_sensors.rows())));
    }
    let direction = find_separating_direction(y_sensors, seed)?;
    let svd = jacobi_svd(u, DEFAULT_RANK_TOL)?;
    let r_tilde = n_width.min(svd.rank);
    let z = svd.u.column_range(0, r_tilde);
    let trunk = build_value_interpolating_trunk(y_sensors, &z, n_width, &direction)?;
    let a_star = Matrix::from_fn(n_width + 1, u.cols(), |i, k| {
        if i >= 1 && i <= r_tilde {
            svd.sigma[i - 1] * svd.v[(k, i - 1)]
        } else {
            0.0
        }
    });
    Ok(InterpolatingTrunk {
        trunk,
        a_star,
        direction,
        rank: svd.rank,
        r_tilde,
    })
}

/// Orthonormal `m × count` block spanning directions orthogonal to `basis`.
fn orthogonal_complement(basis: &Matrix, count: usize, seed: u64) -> Result<Matrix> {
    let m = basis.rows();
    let q = householder_qr(basis).map_err(Error::RankDeficientTrunk)?.q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Matrix::from_fn(m, count, |_, _| rng.sample(StandardNormal));
    for _ in 0..2 {
        let proj = matmul(&q, &matmul_tn(&q, &g)?)?;
        g = g.sub(&proj)?;
    }
    Ok(householder_qr(&g).map_err(Error::RankDeficientTrunk)?.q)
}

/// Tanh random-feature branch for exact last-layer fitting.
///
/// Inputs are standardized per column. Hidden unit `h` gets a Gaussian
/// direction scaled by `2·K^{1/m_x}`, roughly the inverse sample spacing, and
/// its transition is centered at training input `h mod K`, so the features
/// of distinct inputs stay well separated.
pub fn interpolating_branch(f_inputs: &Matrix, width: usize, n_out: usize, seed: u64) -> Result<Mlp> {
    let (k, m_x) = f_inputs.shape();
    if k == 0 {
        return Err(Error::Shape("no input samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::init(&[m_x, width, n_out], Activation::Tanh, InitScheme::Xavier, &mut rng)?;
    let mut mean = vec![0.0; m_x];
    let mut std = vec![1.0; m_x];
    for j in 0..m_x {
        let col = f_inputs.column(j);
        mean[j] = col.iter().sum::<f64>() / k as f64;
        let var = col.iter().map(|x| (x - mean[j]) * (x - mean[j])).sum::<f64>() / k as f64;
        if var > 0.0 {
            std[j] = var.sqrt();
        }
    }
    let slope = 2.0 * (k as f64).powf(1.0 / m_x as f64) / (m_x as f64).sqrt();
    let shift = Uniform::new(-0.5, 0.5).expect("valid range");
    for h in 0..width {
        let centre = f_inputs.row(h % k);
        let mut b = shift.sample(&mut rng);
        for j in 0..m_x {
            let w = rng.sample::<f64, _>(StandardNormal) * slope / std[j];
            net.weights[0][(h, j)] = w;
            b -= w * centre[j];
        }
        net.biases[0][h] = b;
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub n_width: usize,
    pub rank: usize,
    pub r_tilde: usize,
    pub trunk_loss: f64,
    pub branch_loss: f64,
    pub monolithic_loss: f64,
    /// `‖ΦTC − U‖²_F / ‖U‖²_F`
    pub monolithic_relative: f64,
    /// `Σ_{j>N} σ_j² / ‖U‖²_F`
    pub eckart_young_relative: f64,
    pub tolerance: f64,
    pub zero_loss_case: bool,
    pub passed: bool,
}

/// Tolerance on the relative loss when `N ≥ rank(U)`.
pub const ZERO_LOSS_TOL: f64 = 1e-8;
/// Allowed relative excess over the Eckart–Young bound when `N < rank(U)`.
pub const EY_TOL: f64 = 1e-6;

/// Constructed trunk, QR orthonormalization, and an exactly interpolating
/// branch; checks that the assembled DeepONet reaches zero training loss
/// (or the best rank-`N` error when `N < rank(U)`).
///
/// When `N > rank(U)` the unused trunk outputs interpolate an orthonormal
/// complement of `span{1, Z}` instead of zero, so `Φ` keeps full column rank;
/// their rows in `A*` stay zero, so the step-1 loss is unchanged.
pub fn verify_zero_loss_pipeline(data: &OperatorDataset, n_width: usize, seed: u64) -> Result<Certificate> {
    let y = &data.y_sensors;
    let u = &data.u_matrix;
    if n_width + 1 > data.m_y() {
        return Err(Error::Config(format!("need N + 1 <= m_y, got N = {n_width}, m_y = {}", data.m_y())));
    }
    let base = build_interpolating_trunk(y, u, n_width, seed)?;
    let r_tilde = base.r_tilde;
    let trunk = if n_width > r_tilde {
        let svd = jacobi_svd(u, DEFAULT_RANK_TOL)?;
        let z = svd.u.column_range(0, r_tilde);
        let ones_z = Matrix::filled(y.rows(), 1, 1.0).hcat(&z)?;
        let pad = orthogonal_complement(&ones_z, n_width - r_tilde, seed ^ 0x5eed)?;
        build_value_interpolating_trunk(y, &z.hcat(&pad)?, n_width, &base.direction)?
    } else {
        base.trunk
    };
    let a_star = base.a_star;
    let denom = (data.k() * data.m_y()) as f64;
    let phi = crate::deeponet::assemble_phi(&trunk, y)?;
    let trunk_loss = matmul(&phi, &a_star)?.sub(u)?.frobenius_norm_sq() / denom;

    let (t_star, target) = orthonormalize(&trunk, &a_star, y)?;
    let width = 64.max(4 * data.k());
    let branch = interpolating_branch(&data.f_matrix, width, n_width + 1, seed.wrapping_add(1))?;
    let cfg = TrainConfig {
        branch_solver: BranchSolver::LeastSquares,
        ..TrainConfig::default()
    };
    let (branch, branch_loss, _) = train_branch_step2(&data.f_matrix, &target, &branch, &cfg)?;
    let model = DeepONetModel::new(trunk, branch, Some(t_star))?;
    let mono = monolithic_loss(&model, data)?;

    let u_sq = u.frobenius_norm_sq();
    let monolithic_relative = mono * denom / u_sq;
    let eckart_young_relative = best_rank_k_error(u, n_width) / u_sq;
    let zero_loss_case = n_width >= base.rank;
    let (tolerance, passed) = if zero_loss_case {
        (ZERO_LOSS_TOL, monolithic_relative <= ZERO_LOSS_TOL)
    } else {
        (EY_TOL, (monolithic_relative - eckart_young_relative).abs() <= EY_TOL)
    };
    Ok(Certificate {
        n_width,
        rank: base.rank,
        r_tilde,
        trunk_loss,
        branch_loss,
        monolithic_loss: mono,
        monolithic_relative,
        eckart_young_relative,
        tolerance,
        zero_loss_case,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::linspace;
    use crate::deeponet::assemble_phi;

    fn eval1(net: &Mlp, x: f64) -> f64 {
        net.forward(&Matrix::from_rows(&[[x]])).unwrap()[(0, 0)]
    }

    #[test]
    fn hat_values_by_case() {
        let net = hat_network(HatParams { a: 0.0, b: 2.0 }).unwrap();
        assert_eq!(eval1(&net, 1.0), 1.0);
        assert_eq!(eval1(&net, -0.5), 0.0);
        assert_eq!(eval1(&net, -0.25), 0.5);
        assert_eq!(eval1(&net, 2.25), 0.5);
        assert_eq!(eval1(&net, 3.0), 0.0);
        assert!(hat_network(HatParams { a: 1.0, b: 1.0 }).is_err());
        assert_eq!(net.arch(), &[1, 2, 2, 1]);
    }

    #[test]
    fn one_dimensional_direction() {
        let y = Matrix::column_vector(&[0.0, 1.0, 5.0]);
        let d = find_separating_direction(&y, 0).unwrap();
        assert_eq!(d.v.len(), 1);
        assert_eq!(d.v[0].abs(), 1.0);
        assert_eq!(d.scale, 2.0);
    }

    #[test]
    fn duplicate_sensor_detected() {
        let y = Matrix::from_rows(&[[0.0, 1.0], [0.5, 0.5], [0.0, 1.0]]);
        assert!(matches!(
            find_separating_direction(&y, 0),
            Err(Error::DuplicateSensor { first: 0, second: 2 })
        ));
    }

    #[test]
    fn trunk_reproduces_values_and_architecture() {
        let y = Matrix::from_fn(7, 2, |i, j| ((i * 2 + j) as f64 * 1.3).sin());
        let values = Matrix::from_fn(7, 2, |i, j| (i as f64 - 3.0) * (j as f64 + 0.5));
        let dir = find_separating_direction(&y, 1).unwrap();
        let net = build_value_interpolating_trunk(&y, &values, 3, &dir).unwrap();
        assert_eq!(net.num_layers(), 2 * 7 + 1);
        let mut expected_arch = vec![2, 4, 4];
        expected_arch.extend(std::iter::repeat_n(8, 12));
        expected_arch.push(3);
        assert_eq!(net.arch(), expected_arch.as_slice());
        let out = net.forward(&y).unwrap();
        for i in 0..7 {
            assert!((out[(i, 0)] - values[(i, 0)]).abs() <= 1e-10);
            assert!((out[(i, 1)] - values[(i, 1)]).abs() <= 1e-10);
            assert_eq!(out[(i, 2)], 0.0);
        }
    }

    #[test]
    fn rank_one_reconstruction() {
        let y = Matrix::column_vector(&[0.0, 0.3, 0.7, 1.0, 1.6]);
        let z = [1.0, -2.0, 0.5, 3.0, 1.5];
        let w = [0.4, -1.0, 2.0];
        let u = Matrix::from_fn(5, 3, |i, k| z[i] * w[k]);
        let built = build_interpolating_trunk(&y, &u, 1, 0).unwrap();
        assert_eq!((built.rank, built.r_tilde), (1, 1));
        let phi = assemble_phi(&built.trunk, &y).unwrap();
        let fitted = matmul(&phi, &built.a_star).unwrap();
        assert!(fitted.sub(&u).unwrap().max_abs() <= 1e-10);
        // trunk values are ±z/‖z‖
        let zn = dot(&z, &z).sqrt();
        let s = phi[(3, 1)].signum();
        for i in 0..5 {
            assert!((phi[(i, 1)] - s * z[i] / zn).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_data_is_rejected() {
        let y = Matrix::column_vector(&[0.0, 1.0, 2.0]);
        let err = build_interpolating_trunk(&y, &Matrix::zeros(3, 2), 1, 0).err().unwrap();
        assert!(matches!(err, Error::Linalg(crate::linalg::LinalgError::ZeroMatrix)));
    }

    #[test]
    fn interpolating_branch_separates_inputs() {
        let f = Matrix::column_vector(&linspace(1.0, 1000.0, 40));
        let net = interpolating_branch(&f, 160, 3, 0).unwrap();
        let h = net.hidden_features(&f).unwrap();
        let design = Matrix::from_fn(40, 161, |i, j| if j < 160 { h[(i, j)] } else { 1.0 });
        let s = jacobi_svd(&design, 1e-300).unwrap();
        assert_eq!(s.rank, 40);
        assert!(s.sigma[0] / s.sigma[39] < 1e8);
    }
    fn smooth_dataset(m_y: usize, k: usize) -> OperatorDataset {
        use crate::data::GeneratorMeta;
        let y = Matrix::from_fn(m_y, 2, |i, j| ((i * 2 + j) as f64 * 0.77).sin());
        let betas: Vec<f64> = (0..k).map(|i| 0.3 + 0.4 * i as f64).collect();
        let u = Matrix::from_fn(m_y, k, |i, c| (betas[c] * (y[(i, 0)] + 2.0 * y[(i, 1)])).cos() + betas[c] * y[(i, 0)]);
        OperatorDataset::new(
            "smooth",
            Matrix::zeros(1, 1),
            y,
            Matrix::column_vector(&betas),
            u,
            GeneratorMeta {
                generator: "custom".into(),
                params: serde_json::Value::Null,
            },
        )
        .unwrap()
    }

    #[test]
    fn pipeline_reaches_zero_loss() {
        let ds = smooth_dataset(12, 5);
        let cert = verify_zero_loss_pipeline(&ds, 5, 0).unwrap();
        assert_eq!(cert.rank, 5);
        assert!(cert.passed && cert.zero_loss_case, "{cert:?}");
        let padded = verify_zero_loss_pipeline(&ds, 8, 0).unwrap();
        assert!(padded.passed, "{padded:?}");
    }

    #[test]
    fn pipeline_below_rank_matches_eckart_young() {
        let ds = smooth_dataset(12, 5);
        let cert = verify_zero_loss_pipeline(&ds, 4, 0).unwrap();
        assert!(!cert.zero_loss_case);
        assert!(cert.passed, "{cert:?}");
        assert!(cert.eckart_young_relative > 0.0);
    }
}
