//! Unstacked DeepONet: trunk matrix `Φ`, branch matrix `C`, predictions and
//! the matrix-form training loss.
//!
//! With trunk `φ₀: ℝ^{d_y} → ℝ^N` and branch `c: ℝ^{m_x} → ℝ^{N+1}`, the
//! model evaluates `(1, φ₀(y))ᵀ T c(f)`, where `T` defaults to the identity.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{matrix_from_le_bytes, matrix_to_le_bytes, OperatorDataset};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::nn::{Activation, GradientSet, InitScheme, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetModel {
    pub trunk: Mlp,
    pub branch: Mlp,
    pub t_matrix: Option<Matrix>,
}

/// Initialization scheme matched to the activation: He for ReLU, Xavier for tanh.
pub fn default_scheme(activation: Activation) -> InitScheme {
    match activation {
        Activation::Relu => InitScheme::He,
        Activation::Tanh => InitScheme::Xavier,
    }
}

impl DeepONetModel {
    pub fn new(trunk: Mlp, branch: Mlp, t_matrix: Option<Matrix>) -> Result<Self> {
        let n = trunk.output_dim();
        if branch.output_dim() != n + 1 {
            return Err(Error::Shape(format!(
                "branch outputs {} coefficients, trunk width {n} needs {}",
                branch.output_dim(),
                n + 1
            )));
        }
        if let Some(t) = &t_matrix {
            if t.shape() != (n + 1, n + 1) || !t.is_finite() {
                return Err(Error::Shape(format!(
                    "T must be a finite {0}x{0} matrix, got {1:?}",
                    n + 1,
                    t.shape()
                )));
            }
        }
        Ok(Self { trunk, branch, t_matrix })
    }

    /// Fresh model; the trunk and branch draw from one seeded stream, trunk first.
    pub fn init(
        trunk_arch: &[usize],
        branch_arch: &[usize],
        trunk_activation: Activation,
        branch_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Mlp::init(trunk_arch, trunk_activation, default_scheme(trunk_activation), &mut rng)?;
        let branch = Mlp::init(branch_arch, branch_activation, default_scheme(branch_activation), &mut rng)?;
        Self::new(trunk, branch, None)
    }

    /// Trunk width `N`.
    pub fn width(&self) -> usize {
        self.trunk.output_dim()
    }

    /// `T·C` (or `C` when no `T` is stored).
    pub fn coefficients(&self, f_inputs: &Matrix) -> Result<Matrix> {
        let c = assemble_c(&self.branch, f_inputs)?;
        match &self.t_matrix {
            Some(t) => Ok(matmul(t, &c)?),
            None => Ok(c),
        }
    }

    /// `Φ(y_points)·T`, the reparameterized basis at the given points.
    pub fn basis(&self, y_points: &Matrix) -> Result<Matrix> {
        let phi = assemble_phi(&self.trunk, y_points)?;
        match &self.t_matrix {
            Some(t) => Ok(matmul(&phi, t)?),
            None => Ok(phi),
        }
    }

    /// Predictions for every input row of `f_inputs` at every point: `q × K`.
    pub fn predict_batch(&self, f_inputs: &Matrix, y_points: &Matrix) -> Result<Matrix> {
        let phi = assemble_phi(&self.trunk, y_points)?;
        Ok(matmul(&phi, &self.coefficients(f_inputs)?)?)
    }
}

/// `m_y × (N+1)` matrix with rows `(1, φ₀(y_i))`.
pub fn assemble_phi(trunk: &Mlp, y_sensors: &Matrix) -> Result<Matrix> {
    let out = trunk.forward(y_sensors)?;
    Ok(augment_ones(&out))
}

fn augment_ones(out: &Matrix) -> Matrix {
    let (m, n) = out.shape();
    let mut phi = Matrix::zeros(m, n + 1);
    for i in 0..m {
        let row = phi.row_mut(i);
        row[0] = 1.0;
        row[1..].copy_from_slice(out.row(i));
    }
    phi
}

/// `(N+1) × K` matrix whose column `k` is the branch output on row `k` of `f_inputs`.
pub fn assemble_c(branch: &Mlp, f_inputs: &Matrix) -> Result<Matrix> {
    Ok(branch.forward(f_inputs)?.transpose())
}

/// Prediction at `y_points` for a single input vector `f`.
pub fn predict(model: &DeepONetModel, f: &[f64], y_points: &Matrix) -> Result<Vec<f64>> {
    let x = Matrix::from_vec(1, f.len(), f.to_vec())?;
    Ok(model.predict_batch(&x, y_points)?.into_vec())
}

/// `‖Φ T C − U‖²_F / (K·m_y)` on the dataset's sensors.
pub fn monolithic_loss(model: &DeepONetModel, data: &OperatorDataset) -> Result<f64> {
    let pred = model.predict_batch(&data.f_matrix, &data.y_sensors)?;
    let resid = pred.sub(&data.u_matrix)?;
    Ok(resid.frobenius_norm_sq() / (data.k() * data.m_y()) as f64)
}

pub struct LossGradient {
    pub loss: f64,
    pub trunk: GradientSet,
    pub branch: GradientSet,
}

/// Monolithic loss and its exact gradient with respect to both networks.
pub fn monolithic_loss_grad(model: &DeepONetModel, data: &OperatorDataset) -> Result<LossGradient> {
    let trunk_cache = model.trunk.forward_cached(&data.y_sensors)?;
    let branch_cache = model.branch.forward_cached(&data.f_matrix)?;
    let phi = augment_ones(&trunk_cache.output);
    // branch output is K × (N+1), i.e. Cᵀ
    let c = branch_cache.output.transpose();
    let tc = match &model.t_matrix {
        Some(t) => matmul(t, &c)?,
        None => c,
    };
    let mut resid = matmul(&phi, &tc)?;
    if resid.shape() != data.u_matrix.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs U {:?}",
            resid.shape(),
            data.u_matrix.shape()
        )));
    }
    for (r, u) in resid.data_mut().iter_mut().zip(data.u_matrix.data()) {
        *r -= u;
    }
    let denom = (data.k() * data.m_y()) as f64;
    let loss = resid.frobenius_norm_sq() / denom;
    let g = resid.scale(2.0 / denom);

    // dΦ = G (TC)ᵀ; the constant column carries no parameters
    let dphi = matmul_nt(&g, &tc)?;
    let trunk_up = dphi.column_range(1, dphi.cols());
    // dC = Tᵀ Φᵀ G, transposed into the branch's K × (N+1) layout
    let mut dc = matmul_tn(&phi, &g)?;
    if let Some(t) = &model.t_matrix {
        dc = matmul_tn(t, &dc)?;
    }
    let branch_up = dc.transpose();

    Ok(LossGradient {
        loss,
        trunk: model.trunk.backward_cached(&trunk_cache, &trunk_up)?,
        branch: model.branch.backward_cached(&branch_cache, &branch_up)?,
    })
}

// ---------------------------------------------------------------------------
// Model directory I/O

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    trunk_arch: Vec<usize>,
    branch_arch: Vec<usize>,
    trunk_activation: Activation,
    branch_activation: Activation,
    width: usize,
    has_t_matrix: bool,
    endianness: String,
    dtype: String,
}

fn params_to_bytes(net: &Mlp) -> Vec<u8> {
    net.params_flat().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn net_from_bytes(bytes: &[u8], arch: &[usize], activation: Activation, file: &str) -> Result<Mlp> {
    let mut net = Mlp::zeros(arch, activation).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let values = matrix_from_le_bytes(bytes, 1, net.num_params()).map_err(|e| Error::CorruptModel(format!("{file}: {e}")))?;
    net.set_params_flat(values.data())?;
    Ok(net)
}

/// Writes `model.json`, `trunk.bin`, `branch.bin` and, if present, `t_matrix.bin`.
pub fn save_model(model: &DeepONetModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        trunk_arch: model.trunk.arch().to_vec(),
        branch_arch: model.branch.arch().to_vec(),
        trunk_activation: model.trunk.activation,
        branch_activation: model.branch.activation,
        width: model.width(),
        has_t_matrix: model.t_matrix.is_some(),
        endianness: "little".into(),
        dtype: "f64".into(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("trunk.bin"), params_to_bytes(&model.trunk))?;
    fs::write(dir.join("branch.bin"), params_to_bytes(&model.branch))?;
    let t_path = dir.join("t_matrix.bin");
    match &model.t_matrix {
        Some(t) => fs::write(t_path, matrix_to_le_bytes(t))?,
        None if t_path.exists() => fs::remove_file(t_path)?,
        None => {}
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<DeepONetModel> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)
        .map_err(|e| Error::CorruptModel(format!("model.json: {e}")))?;
    if manifest.endianness != "little" || manifest.dtype != "f64" {
        return Err(Error::CorruptModel(format!(
            "unsupported encoding {}/{}",
            manifest.endianness, manifest.dtype
        )));
    }
    let trunk = net_from_bytes(
        &fs::read(dir.join("trunk.bin"))?,
        &manifest.trunk_arch,
        manifest.trunk_activation,
        "trunk.bin",
    )?;
    let branch = net_from_bytes(
        &fs::read(dir.join("branch.bin"))?,
        &manifest.branch_arch,
        manifest.branch_activation,
        "branch.bin",
    )?;
    if trunk.output_dim() != manifest.width {
        return Err(Error::CorruptModel("width does not match trunk architecture".into()));
    }
    let t_matrix = if manifest.has_t_matrix {
        let n = manifest.width + 1;
        Some(
            matrix_from_le_bytes(&fs::read(dir.join("t_matrix.bin"))?, n, n)
                .map_err(|e| Error::CorruptModel(format!("t_matrix.bin: {e}")))?,
        )
    } else {
        None
    };
    DeepONetModel::new(trunk, branch, t_matrix).map_err(|e| Error::CorruptModel(e.to_string()))
}
