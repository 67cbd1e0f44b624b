//! Monolithic training (VAN) and the two-step trunk/branch procedure, with
//! and without QR orthonormalization of the learned trunk basis.
//!
//! All procedures are full-batch Adam on every sample of the dataset passed
//! in; callers hand over the training subset.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::OperatorDataset;
use crate::deeponet::{assemble_c, monolithic_loss, monolithic_loss_grad, DeepONetModel};
use crate::error::{Error, Result};
use crate::linalg::{
    householder_qr, least_squares, matmul, matmul_compensated, matmul_nt, matmul_tn, min_norm_solve, solve_upper_triangular,
    LinalgError, Matrix,
};
use crate::nn::Mlp;
use crate::optimize::{AdamConfig, AdamState, LrSchedule};

/// Step-2 losses at or below this fraction of `‖target‖²` count as exact
/// interpolation for the equivalence check.
pub const INTERPOLATION_TOL: f64 = 1e-14;
/// Relative tolerance of the equivalence check between the assembled
/// monolithic loss and the step-1 loss.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Van,
    TwoStep,
    TwoStepNoQr,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Van => "VAN",
            Method::TwoStep => "2ST",
            Method::TwoStepNoQr => "2STw/oQR",
        }
    }
}

/// How step 2 fits the branch to its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSolver {
    /// Full-batch Adam on every branch parameter.
    #[default]
    Adam,
    /// Hidden layers frozen; the last affine layer is solved exactly by
    /// (minimum-norm) least squares.
    LeastSquares,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_a_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub iters_trunk: u64,
    pub iters_branch: u64,
    pub iters_mono: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_a_init_scale")]
    pub a_init_scale: f64,
    #[serde(default)]
    pub ls_refit_every: u64,
    #[serde(default)]
    pub branch_solver: BranchSolver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::TwoStep,
            iters_trunk: 1000,
            iters_branch: 1000,
            iters_mono: 2000,
            lr: default_lr(),
            schedule: LrSchedule::Constant,
            seed: 0,
            a_init_scale: default_a_init_scale(),
            ls_refit_every: 0,
            branch_solver: BranchSolver::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.a_init_scale >= 0.0 && self.a_init_scale.is_finite()) {
            return bad(format!("a_init_scale must be nonnegative, got {}", self.a_init_scale));
        }
        let counts: &[(&str, u64)] = match self.method {
            Method::Van => &[("iters_mono", self.iters_mono)],
            _ => &[("iters_trunk", self.iters_trunk), ("iters_branch", self.iters_branch)],
        };
        for (name, v) in counts {
            if *v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if let LrSchedule::StepDecay { factor, every } = self.schedule {
            if !(factor > 0.0) || every == 0 {
                return bad("step decay needs factor > 0 and every >= 1".into());
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    /// Monolithic loss (VAN) or step-1 loss (two-step) before every update,
    /// followed by the final value.
    pub loss_trace: Vec<f64>,
    /// Step-2 loss trace; empty for VAN.
    pub branch_trace: Vec<f64>,
    pub final_trunk_loss: Option<f64>,
    pub final_branch_loss: Option<f64>,
    pub final_monolithic_loss: f64,
    /// `‖C − target‖² / ‖target‖²` after step 2.
    pub step2_relative_loss: Option<f64>,
    /// Whether the assembled loss reproduced the step-1 loss; `None` when
    /// step 2 did not interpolate its target.
    pub equivalence_holds: Option<bool>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Writes `iter,loss` rows.
pub fn write_trace_csv(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "iter,loss")?;
    for (i, v) in trace.iter().enumerate() {
        writeln!(out, "{i},{v:e}")?;
    }
    out.flush()?;
    Ok(())
}

fn check_data(data: &OperatorDataset, model: &DeepONetModel) -> Result<()> {
    if data.k() == 0 {
        return Err(Error::Shape("dataset has no samples".into()));
    }
    if model.trunk.input_dim() != data.d_y() {
        return Err(Error::Shape(format!(
            "trunk takes {} coordinates, sensors have {}",
            model.trunk.input_dim(),
            data.d_y()
        )));
    }
    if model.branch.input_dim() != data.m_x() {
        return Err(Error::Shape(format!(
            "branch takes {} inputs, dataset has m_x = {}",
            model.branch.input_dim(),
            data.m_x()
        )));
    }
    Ok(())
}

/// Joint Adam training of both networks on the monolithic loss.
pub fn train_monolithic(
    data: &OperatorDataset,
    model: &DeepONetModel,
    cfg: &TrainConfig,
) -> Result<(DeepONetModel, TrainReport)> {
    cfg.validate()?;
    check_data(data, model)?;
    if model.t_matrix.is_some() {
        return Err(Error::Config("monolithic training expects a model without T".into()));
    }
    let start = Instant::now();
    let mut model = model.clone();
    let mut adam = AdamState::new(cfg.adam(), model.trunk.num_params() + model.branch.num_params());
    let mut trace = Vec::with_capacity(cfg.iters_mono as usize + 1);
    for it in 0..cfg.iters_mono {
        let g = monolithic_loss_grad(&model, data)?;
        trace.push(g.loss);
        let mut params = model.trunk.param_slices_mut();
        params.extend(model.branch.param_slices_mut());
        let mut grads = g.trunk.slices();
        grads.extend(g.branch.slices());
        adam.step_with_lr(&mut params, &grads, cfg.schedule.lr_at(cfg.lr, it))?;
    }
    let final_loss = monolithic_loss(&model, data)?;
    trace.push(final_loss);
    let report = TrainReport {
        method: Method::Van.tag().into(),
        loss_trace: trace,
        branch_trace: Vec::new(),
        final_trunk_loss: None,
        final_branch_loss: None,
        final_monolithic_loss: final_loss,
        step2_relative_loss: None,
        equivalence_holds: None,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

pub struct Step1Result {
    pub trunk: Mlp,
    pub a_star: Matrix,
    pub trunk_loss: f64,
    pub trace: Vec<f64>,
}

fn augment_ones(out: &Matrix) -> Matrix {
    let (m, n) = out.shape();
    Matrix::from_fn(m, n + 1, |i, j| if j == 0 { 1.0 } else { out[(i, j - 1)] })
}

/// Step-1 objective `‖Φ(μ)A − U‖²/(K m_y)` with gradients in `μ` and `A`.
pub fn step1_loss_grad(trunk: &Mlp, a: &Matrix, data: &OperatorDataset) -> Result<(f64, Vec<f64>, Matrix)> {
    let cache = trunk.forward_cached(&data.y_sensors)?;
    let phi = augment_ones(&cache.output);
    let mut resid = matmul(&phi, a)?;
    for (r, u) in resid.data_mut().iter_mut().zip(data.u_matrix.data()) {
        *r -= u;
    }
    let denom = (data.k() * data.m_y()) as f64;
    let loss = resid.frobenius_norm_sq() / denom;
    let g = resid.scale(2.0 / denom);
    let da = matmul_tn(&phi, &g)?;
    let dphi = matmul_nt(&g, a)?;
    let grads = trunk.backward_cached(&cache, &dphi.column_range(1, dphi.cols()))?;
    Ok((loss, grads.flatten(), da))
}

fn step1_loss(trunk: &Mlp, a: &Matrix, data: &OperatorDataset) -> Result<f64> {
    let phi = augment_ones(&trunk.forward(&data.y_sensors)?);
    let resid = matmul(&phi, a)?.sub(&data.u_matrix)?;
    Ok(resid.frobenius_norm_sq() / (data.k() * data.m_y()) as f64)
}

/// Exact least-squares `A` for the current trunk; `None` while `Φ` is rank deficient.
fn refit_a(trunk: &Mlp, data: &OperatorDataset) -> Result<Option<Matrix>> {
    let phi = augment_ones(&trunk.forward(&data.y_sensors)?);
    match least_squares(&phi, &data.u_matrix) {
        Ok(a) => Ok(Some(a)),
        Err(LinalgError::RankDeficient { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Step 1: trains the trunk jointly with a free coefficient matrix `A`.
pub fn train_trunk_step1(data: &OperatorDataset, trunk: &Mlp, cfg: &TrainConfig) -> Result<Step1Result> {
    let n1 = trunk.output_dim() + 1;
    if n1 > data.m_y() {
        return Err(Error::Config(format!(
            "need N + 1 <= m_y, got N = {} and m_y = {}",
            n1 - 1,
            data.m_y()
        )));
    }
    if trunk.input_dim() != data.d_y() {
        return Err(Error::Shape(format!(
            "trunk takes {} coordinates, sensors have {}",
            trunk.input_dim(),
            data.d_y()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = if cfg.a_init_scale > 0.0 {
        let normal = Normal::new(0.0, cfg.a_init_scale).map_err(|e| Error::Config(e.to_string()))?;
        Matrix::from_fn(n1, data.k(), |_, _| normal.sample(&mut rng))
    } else {
        Matrix::zeros(n1, data.k())
    };
    let mut trunk = trunk.clone();
    let mut adam = AdamState::new(cfg.adam(), trunk.num_params() + a.data().len());
    let mut trace = Vec::with_capacity(cfg.iters_trunk as usize + 1);
    let refit = cfg.ls_refit_every;
    for it in 0..cfg.iters_trunk {
        if refit > 0 && it % refit == 0 {
            if let Some(fit) = refit_a(&trunk, data)? {
                a = fit;
            }
        }
        let (loss, dmu, da) = step1_loss_grad(&trunk, &a, data)?;
        trace.push(loss);
        let mut grads: Vec<&[f64]> = Vec::new();
        let sizes: Vec<usize> = trunk.param_slices_mut().iter().map(|s| s.len()).collect();
        let mut offset = 0;
        for n in sizes {
            grads.push(&dmu[offset..offset + n]);
            offset += n;
        }
        grads.push(da.data());
        let mut params = trunk.param_slices_mut();
        params.push(a.data_mut());
        adam.step_with_lr(&mut params, &grads, cfg.schedule.lr_at(cfg.lr, it))?;
    }
    if refit > 0 {
        if let Some(fit) = refit_a(&trunk, data)? {
            a = fit;
        }
    }
    let trunk_loss = step1_loss(&trunk, &a, data)?;
    trace.push(trunk_loss);
    Ok(Step1Result {
        trunk,
        a_star: a,
        trunk_loss,
        trace,
    })
}

/// `T* = (R*)⁻¹` and the step-2 target `R*·A*` from the QR of `Φ(μ*)`.
///
/// Two passes: `Φ = Q₁R₁`, then `ΦR₁⁻¹ = Q₂R₂`, so `R* = R₂R₁`. The second
/// pass removes most of the `ε·κ(Φ)` loss of orthogonality in `ΦT*`; the
/// products feeding it are compensated.
pub fn orthonormalize(trunk: &Mlp, a_star: &Matrix, y_sensors: &Matrix) -> Result<(Matrix, Matrix)> {
    let phi = augment_ones(&trunk.forward(y_sensors)?);
    let qr = |m: &Matrix| {
        householder_qr(m).map_err(|e| match e {
            LinalgError::RankDeficient { .. } | LinalgError::NotTall { .. } => Error::RankDeficientTrunk(e),
            other => other.into(),
        })
    };
    let eye = Matrix::identity(phi.cols());
    let r1 = qr(&phi)?.r;
    let t1 = solve_upper_triangular(&r1, &eye)?;
    let r2 = qr(&matmul_compensated(&phi, &t1)?)?.r;
    let t2 = solve_upper_triangular(&r2, &eye)?;
    let t_star = matmul_compensated(&t1, &t2)?;
    let target = matmul(&r2, &matmul(&r1, a_star)?)?;
    Ok((t_star, target))
}

fn step2_loss(branch: &Mlp, f_inputs: &Matrix, target: &Matrix) -> Result<f64> {
    let c = assemble_c(branch, f_inputs)?;
    Ok(c.sub(target)?.frobenius_norm_sq() / target.cols() as f64)
}

/// Step 2: fits the branch so that `C(θ) ≈ target` in `‖·‖²_F / K`.
pub fn train_branch_step2(
    f_inputs: &Matrix,
    target: &Matrix,
    branch: &Mlp,
    cfg: &TrainConfig,
) -> Result<(Mlp, f64, Vec<f64>)> {
    if target.shape() != (branch.output_dim(), f_inputs.rows()) {
        return Err(Error::Shape(format!(
            "target {:?} vs (branch outputs, K) = ({}, {})",
            target.shape(),
            branch.output_dim(),
            f_inputs.rows()
        )));
    }
    match cfg.branch_solver {
        BranchSolver::Adam => branch_adam(f_inputs, target, branch, cfg),
        BranchSolver::LeastSquares => {
            let before = step2_loss(branch, f_inputs, target)?;
            let fitted = solve_last_layer(branch, f_inputs, target)?;
            let after = step2_loss(&fitted, f_inputs, target)?;
            Ok((fitted, after, vec![before, after]))
        }
    }
}

fn branch_adam(f_inputs: &Matrix, target: &Matrix, branch: &Mlp, cfg: &TrainConfig) -> Result<(Mlp, f64, Vec<f64>)> {
    let k = f_inputs.rows() as f64;
    let target_t = target.transpose();
    let mut branch = branch.clone();
    let mut adam = AdamState::new(cfg.adam(), branch.num_params());
    let mut trace = Vec::with_capacity(cfg.iters_branch as usize + 1);
    for it in 0..cfg.iters_branch {
        let cache = branch.forward_cached(f_inputs)?;
        let mut resid = cache.output.clone();
        for (r, t) in resid.data_mut().iter_mut().zip(target_t.data()) {
            *r -= t;
        }
        trace.push(resid.frobenius_norm_sq() / k);
        let grads = branch.backward_cached(&cache, &resid.scale(2.0 / k))?;
        let g = grads.slices();
        adam.step_with_lr(&mut branch.param_slices_mut(), &g, cfg.schedule.lr_at(cfg.lr, it))?;
    }
    let loss = step2_loss(&branch, f_inputs, target)?;
    trace.push(loss);
    Ok((branch, loss, trace))
}

/// Replaces the branch's last affine layer by the exact least-squares fit of
/// `target` on the frozen hidden features (minimum norm when underdetermined).
pub fn solve_last_layer(branch: &Mlp, f_inputs: &Matrix, target: &Matrix) -> Result<Mlp> {
    let h = branch.hidden_features(f_inputs)?;
    let (k, width) = h.shape();
    let design = Matrix::from_fn(k, width + 1, |i, j| if j < width { h[(i, j)] } else { 1.0 });
    let rhs = target.transpose();
    let coef = if k >= width + 1 {
        least_squares(&design, &rhs)?
    } else {
        min_norm_solve(&design, &rhs)?
    };
    let mut out = branch.clone();
    let last = out.num_layers() - 1;
    let n_out = out.output_dim();
    for o in 0..n_out {
        for j in 0..width {
            out.weights[last][(o, j)] = coef[(j, o)];
        }
        out.biases[last][o] = coef[(width, o)];
    }
    Ok(out)
}

/// Two-step training: step 1, orthonormalization (2ST only), step 2, and the
/// equivalence check between the assembled and step-1 losses.
pub fn train_two_step(
    data: &OperatorDataset,
    model: &DeepONetModel,
    cfg: &TrainConfig,
) -> Result<(DeepONetModel, TrainReport)> {
    cfg.validate()?;
    check_data(data, model)?;
    let start = Instant::now();
    let step1 = train_trunk_step1(data, &model.trunk, cfg)?;
    let (mut out, mut report) = finish_two_step(data, model, &step1, cfg)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    out.t_matrix.get_or_insert_with(|| Matrix::identity(model.width() + 1));
    Ok((out, report))
}

/// Steps after step 1, split out so several step-2 variants can share one
/// step-1 run. `cfg.method` selects whether QR is applied.
pub fn finish_two_step(
    data: &OperatorDataset,
    model: &DeepONetModel,
    step1: &Step1Result,
    cfg: &TrainConfig,
) -> Result<(DeepONetModel, TrainReport)> {
    let start = Instant::now();
    let n1 = model.width() + 1;
    let (t_matrix, target) = match cfg.method {
        Method::TwoStep => orthonormalize(&step1.trunk, &step1.a_star, &data.y_sensors)?,
        Method::TwoStepNoQr => (Matrix::identity(n1), step1.a_star.clone()),
        Method::Van => return Err(Error::Config("VAN is not a two-step method".into())),
    };
    let (branch, branch_loss, branch_trace) = train_branch_step2(&data.f_matrix, &target, &model.branch, cfg)?;
    let assembled = DeepONetModel::new(step1.trunk.clone(), branch, Some(t_matrix))?;
    let mono = monolithic_loss(&assembled, data)?;

    let target_sq = target.frobenius_norm_sq();
    let step2_rel = if target_sq > 0.0 {
        branch_loss * data.k() as f64 / target_sq
    } else {
        branch_loss
    };
    let equivalence = (step2_rel <= INTERPOLATION_TOL).then(|| {
        let scale = data.u_matrix.frobenius_norm_sq() / (data.k() * data.m_y()) as f64;
        (mono - step1.trunk_loss).abs() <= EQUIVALENCE_TOL * scale.max(f64::MIN_POSITIVE)
    });
    let report = TrainReport {
        method: cfg.method.tag().into(),
        loss_trace: step1.trace.clone(),
        branch_trace,
        final_trunk_loss: Some(step1.trunk_loss),
        final_branch_loss: Some(branch_loss),
        final_monolithic_loss: mono,
        step2_relative_loss: Some(step2_rel),
        equivalence_holds: equivalence,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((assembled, report))
}

/// Dispatches on `cfg.method`.
pub fn train(data: &OperatorDataset, model: &DeepONetModel, cfg: &TrainConfig) -> Result<(DeepONetModel, TrainReport)> {
    match cfg.method {
        Method::Van => train_monolithic(data, model, cfg),
        Method::TwoStep | Method::TwoStepNoQr => train_two_step(data, model, cfg),
    }
}

/// `‖(ΦT)ᵀ(ΦT) − I‖_F` and `trace((ΦT)ᵀ(ΦT))` on the given sensors.
pub fn orthonormality_defect(model: &DeepONetModel, y_sensors: &Matrix) -> Result<(f64, f64)> {
    let b = model.basis(y_sensors)?;
    let gram = matmul_tn(&b, &b)?;
    let n = gram.rows();
    let trace = (0..n).map(|i| gram[(i, i)]).sum();
    let defect = gram.sub(&Matrix::identity(n))?.frobenius_norm();
    Ok((defect, trace))
}
