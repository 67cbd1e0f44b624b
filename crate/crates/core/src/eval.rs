//! Test-time metrics: relative ℓ2 errors, conditional optimality, truncation,
//! the sensor-sampling condition, and the generalization sweep.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{
    example3_triplets, gen_example1, gen_example2, gen_example3, OperatorDataset,
};
use crate::deeponet::{assemble_phi, DeepONetModel};
use crate::error::{Error, Result};
use crate::linalg::{householder_qr, matmul, matmul_tn, norm2, Matrix};
use crate::nn::Activation;
use crate::train::{train_two_step, Method, TrainConfig};

/// `‖prediction − target‖₂ / ‖target‖₂`
pub fn relative_l2_error(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let denom = norm2(target);
    if denom == 0.0 {
        return Err(Error::ZeroTarget);
    }
    let diff: Vec<f64> = prediction.iter().zip(target).map(|(p, t)| p - t).collect();
    Ok(norm2(&diff) / denom)
}

/// Least-squares coefficients of `u_test` in the frozen basis `Φ_test·T` and
/// the relative error they achieve.
pub fn conditional_optimal(model: &DeepONetModel, y_test: &Matrix, u_test: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (coef, errors) = conditional_optimal_batch(model, y_test, &Matrix::column_vector(u_test))?;
    Ok((coef.column(0), errors[0]))
}

/// [`conditional_optimal`] for every column of `u_test`, sharing one QR.
pub fn conditional_optimal_batch(
    model: &DeepONetModel,
    y_test: &Matrix,
    u_test: &Matrix,
) -> Result<(Matrix, Vec<f64>)> {
    let basis = model.basis(y_test)?;
    if basis.rows() != u_test.rows() {
        return Err(Error::Shape(format!(
            "{} test points but outputs have {} rows",
            basis.rows(),
            u_test.rows()
        )));
    }
    let qr = householder_qr(&basis).map_err(Error::RankDeficientTrunk)?;
    let qtu = matmul_tn(&qr.q, u_test)?;
    let coef = crate::linalg::solve_upper_triangular(&qr.r, &qtu)?;
    let fitted = matmul(&qr.q, &qtu)?;
    let errors = (0..u_test.cols())
        .map(|k| relative_l2_error(&fitted.column(k), &u_test.column(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok((coef, errors))
}

/// Elementwise clamp to `[−M, M]`; `M = ∞` is the identity.
pub fn truncate_prediction(prediction: &[f64], bound_m: f64) -> Result<Vec<f64>> {
    if !(bound_m > 0.0) {
        return Err(Error::Config(format!("truncation bound must be positive, got {bound_m}")));
    }
    Ok(prediction.iter().map(|z| z.signum() * z.abs().min(bound_m)).collect())
}

/// `(3 ln(3/2) − 1) / (2 + 2 r_t)`
pub fn sensor_kappa(r_t: f64) -> f64 {
    (3.0 * 1.5_f64.ln() - 1.0) / (2.0 + 2.0 * r_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorCondition {
    pub lhs: f64,
    pub rhs: f64,
    pub kappa: f64,
    pub satisfied: bool,
}

/// `max_y ‖Tᵀφ(y)‖²` over the probe grid against `κ·m_y / ln m_y`.
///
/// Uses the model's stored `T`; see [`l2_normalized`] for the scaling that
/// makes the basis orthonormal in the empirical `L²` inner product.
pub fn check_sensor_condition(model: &DeepONetModel, probe_grid: &Matrix, m_y: usize, r_t: f64) -> Result<SensorCondition> {
    if m_y < 3 || !(r_t > 0.0) {
        return Err(Error::Config(format!("need m_y >= 3 and r_t > 0, got {m_y}, {r_t}")));
    }
    let basis = model.basis(probe_grid)?;
    let lhs = (0..basis.rows())
        .map(|i| basis.row(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let kappa = sensor_kappa(r_t);
    let m = m_y as f64;
    let rhs = kappa * m / m.ln();
    Ok(SensorCondition {
        lhs,
        rhs,
        kappa,
        satisfied: lhs <= rhs,
    })
}

/// Copy of `model` with `T` scaled by `√m_y`, so the reparameterized basis is
/// orthonormal under `(1/m_y) Σ_i f(y_i) g(y_i)` on the training sensors.
pub fn l2_normalized(model: &DeepONetModel, m_y: usize) -> DeepONetModel {
    let s = (m_y as f64).sqrt();
    let mut out = model.clone();
    let t = model.t_matrix.clone().unwrap_or_else(|| Matrix::identity(model.width() + 1));
    out.t_matrix = Some(t.scale(s));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
}

/// Bin width of the log10 error histogram.
pub const HISTOGRAM_BIN: f64 = 0.25;
const HISTOGRAM_FLOOR: f64 = -16.0;

pub fn log10_histogram(errors: &[f64]) -> Vec<HistogramBin> {
    if errors.is_empty() {
        return Vec::new();
    }
    let logs: Vec<f64> = errors.iter().map(|e| e.log10().max(HISTOGRAM_FLOOR)).collect();
    let lo = (logs.iter().copied().fold(f64::INFINITY, f64::min) / HISTOGRAM_BIN).floor() as i64;
    let hi = (logs.iter().copied().fold(f64::NEG_INFINITY, f64::max) / HISTOGRAM_BIN).floor() as i64;
    let mut bins: Vec<HistogramBin> = (lo..=hi)
        .map(|b| HistogramBin {
            log10_lo: b as f64 * HISTOGRAM_BIN,
            log10_hi: (b + 1) as f64 * HISTOGRAM_BIN,
            count: 0,
        })
        .collect();
    for l in logs {
        let b = (l / HISTOGRAM_BIN).floor() as i64;
        bins[(b - lo) as usize].count += 1;
    }
    bins
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub errors: Vec<f64>,
    pub mean_relative_error: f64,
    pub std_relative_error: f64,
    pub optimal_errors: Vec<f64>,
    pub mean_optimal_error: f64,
    pub truncation_bound: Option<f64>,
    /// Errors of truncated predictions, when a bound was given.
    pub truncated_errors: Option<Vec<f64>>,
    pub histogram: Vec<HistogramBin>,
}

/// Per-sample errors of `model` on every sample of `test`, with the
/// conditional-optimal reference.
pub fn evaluate(model: &DeepONetModel, test: &OperatorDataset, truncate: Option<f64>) -> Result<EvalReport> {
    let pred = model.predict_batch(&test.f_matrix, &test.y_sensors)?;
    if pred.shape() != test.u_matrix.shape() {
        return Err(Error::Shape(format!(
            "model predicts {:?}, dataset holds {:?}",
            pred.shape(),
            test.u_matrix.shape()
        )));
    }
    let errors = (0..test.k())
        .map(|k| relative_l2_error(&pred.column(k), &test.u_matrix.column(k)))
        .collect::<Result<Vec<_>>>()?;
    let (_, optimal_errors) = conditional_optimal_batch(model, &test.y_sensors, &test.u_matrix)?;
    let truncated_errors = match truncate {
        Some(m) => Some(
            (0..test.k())
                .map(|k| relative_l2_error(&truncate_prediction(&pred.column(k), m)?, &test.u_matrix.column(k)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let (mean, std) = mean_std(&errors);
    let (opt_mean, _) = mean_std(&optimal_errors);
    Ok(EvalReport {
        histogram: log10_histogram(&errors),
        errors,
        mean_relative_error: mean,
        std_relative_error: std,
        optimal_errors,
        mean_optimal_error: opt_mean,
        truncation_bound: truncate,
        truncated_errors,
    })
}

pub fn write_histogram_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "log10_lo,log10_hi,count")?;
    for b in &report.histogram {
        writeln!(out, "{},{},{}", b.log10_lo, b.log10_hi, b.count)?;
    }
    out.flush()?;
    Ok(())
}

/// Pointwise `|prediction − truth|` of test sample `index` at every output
/// sensor, one row per sensor: coordinates then the error.
pub fn write_error_map_csv(model: &DeepONetModel, test: &OperatorDataset, index: usize, path: impl AsRef<Path>) -> Result<()> {
    if index >= test.k() {
        return Err(Error::Config(format!("sample index {index} out of range (K = {})", test.k())));
    }
    let pred = model.predict_batch(&test.f_matrix.select_rows(&[index]), &test.y_sensors)?;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = match test.d_y() {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "y".into()],
        d => (0..d).map(|i| format!("y{i}")).collect(),
    };
    writeln!(out, "{},abs_error", header.join(","))?;
    for i in 0..test.m_y() {
        let coords: Vec<String> = test.y_sensors.row(i).iter().map(|v| format!("{v}")).collect();
        let err = (pred[(i, 0)] - test.u_matrix[(i, index)]).abs();
        writeln!(out, "{},{err:e}", coords.join(","))?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generalization sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ex1,
    Ex2,
    Ex3,
}

impl Family {
    fn default_range(self) -> (f64, f64) {
        match self {
            Family::Ex1 => (1.0, 100.0),
            Family::Ex2 => (0.01, 10.0),
            Family::Ex3 => (0.1, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    N,
    #[serde(rename = "m_x")]
    Mx,
    #[serde(rename = "m_y")]
    My,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::N => "N",
            SweepAxis::Mx => "m_x",
            SweepAxis::My => "m_y",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepAxis::K),
            "N" | "n" => Ok(SweepAxis::N),
            "m_x" | "mx" => Ok(SweepAxis::Mx),
            "m_y" | "my" => Ok(SweepAxis::My),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

fn default_grid_n() -> usize {
    17
}

fn default_test_k() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub family: Family,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    /// Parameter range for the family's scalar inputs; defaults per family.
    #[serde(default)]
    pub param_range: Option<(f64, f64)>,
    /// Baseline values of the axes that are not swept.
    pub k: usize,
    pub n_width: usize,
    #[serde(default)]
    pub m_x: Option<usize>,
    #[serde(default)]
    pub m_y: Option<usize>,
    #[serde(default = "default_test_k")]
    pub test_k: usize,
    pub trunk_hidden: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub replicates: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub mean_train_loss: f64,
    pub std_train_loss: f64,
}

/// SplitMix64 finalizer, used to derive independent per-run seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// `k` samples of the family with parameters drawn uniformly from `range`.
pub fn sample_family(family: Family, grid_n: usize, k: usize, range: (f64, f64), seed: u64) -> Result<OperatorDataset> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(range.0..=range.1)).collect() };
    let ds = match family {
        Family::Ex1 => gen_example1(&draw(k), grid_n)?,
        Family::Ex2 => gen_example2(&draw(k), grid_n)?,
        Family::Ex3 => gen_example3(&example3_triplets(k, seed)?, grid_n)?,
    };
    Ok(ds)
}

struct RunOutcome {
    test_error: f64,
    train_loss: f64,
}

fn run_once(cfg: &SweepConfig, axis: SweepAxis, value: usize, test: &OperatorDataset, seed: u64) -> Result<RunOutcome> {
    let range = cfg.param_range.unwrap_or(cfg.family.default_range());
    let k = if axis == SweepAxis::K { value } else { cfg.k };
    let n = if axis == SweepAxis::N { value } else { cfg.n_width };
    let m_x = if axis == SweepAxis::Mx { Some(value) } else { cfg.m_x };
    let m_y = if axis == SweepAxis::My { Some(value) } else { cfg.m_y };

    let mut train = sample_family(cfg.family, cfg.grid_n, k, range, mix_seed(&[seed, 1]))?;
    let mut test = test.clone();
    if let Some(m) = m_x {
        let s = mix_seed(&[seed, 2]);
        train = train.subsample_input_sensors(m, s)?;
        test = test.subsample_input_sensors(m, s)?;
    }
    if let Some(m) = m_y {
        train = train.subsample_output_sensors(m, mix_seed(&[seed, 3]))?;
    }

    let mut trunk_arch = vec![train.d_y()];
    trunk_arch.extend(&cfg.trunk_hidden);
    trunk_arch.push(n);
    let mut branch_arch = vec![train.m_x()];
    branch_arch.extend(&cfg.branch_hidden);
    branch_arch.push(n + 1);
    let model = DeepONetModel::init(&trunk_arch, &branch_arch, cfg.activation, cfg.activation, mix_seed(&[seed, 4]))?;
    let tcfg = TrainConfig {
        method: Method::TwoStep,
        seed: mix_seed(&[seed, 5]),
        ..cfg.train.clone()
    };
    let (trained, report) = train_two_step(&train, &model, &tcfg)?;
    let eval = evaluate(&trained, &test, None)?;
    Ok(RunOutcome {
        test_error: eval.mean_relative_error,
        train_loss: report.final_trunk_loss.unwrap_or(report.final_monolithic_loss),
    })
}

/// Worker count: `OPERON_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("OPERON_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains 2ST end-to-end for every `(value, replicate)` and reports the mean
/// and standard deviation of the test error and the final step-1 loss.
///
/// Test errors are measured on a fixed test set at every grid node, so the
/// `m_y` axis measures generalization away from the training sensors.
pub fn generalization_sweep(cfg: &SweepConfig, axis: SweepAxis, values: &[usize], replicates: usize) -> Result<Vec<SweepRow>> {
    if replicates < 3 {
        return Err(Error::Config(format!("need at least 3 replicates, got {replicates}")));
    }
    if values.is_empty() || values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep values must be strictly increasing".into()));
    }
    let range = cfg.param_range.unwrap_or(cfg.family.default_range());
    let test = sample_family(cfg.family, cfg.grid_n, cfg.test_k, range, mix_seed(&[cfg.seed, 0xfeed]))?;

    let jobs: Vec<(usize, usize)> = (0..values.len()).flat_map(|v| (0..replicates).map(move |r| (v, r))).collect();
    let results: Mutex<Vec<Option<Result<RunOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let threads = worker_threads().min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (vi, rep) = jobs[j];
                let seed = mix_seed(&[cfg.seed, vi as u64, rep as u64]);
                let out = run_once(cfg, axis, values[vi], &test, seed);
                results.lock().expect("no poisoned workers")[j] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned workers");

    let mut rows = Vec::with_capacity(values.len());
    let mut iter = results.into_iter();
    for &value in values {
        let mut errs = Vec::with_capacity(replicates);
        let mut losses = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            let out = iter.next().flatten().expect("every job ran")?;
            errs.push(out.test_error);
            losses.push(out.train_loss);
        }
        let (me, se) = mean_std(&errs);
        let (ml, sl) = mean_std(&losses);
        rows.push(SweepRow {
            axis: axis.name().into(),
            value,
            replicates,
            mean_test_error: me,
            std_test_error: se,
            mean_train_loss: ml,
            std_train_loss: sl,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "axis,value,replicates,mean_test_error,std_test_error,mean_train_loss,std_train_loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e}",
            r.axis, r.value, r.replicates, r.mean_test_error, r.std_test_error, r.mean_train_loss, r.std_train_loss
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Each consecutive mean either decreases or rises by at most the pooled
/// standard deviation of the two rows.
pub fn nonincreasing_within_std(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| {
        let pooled = ((w[0].std_test_error.powi(2) + w[1].std_test_error.powi(2)) / 2.0).sqrt();
        w[1].mean_test_error <= w[0].mean_test_error + pooled
    })
}

/// Spearman rank correlation (no tie correction).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Trunk values `(1, φ₀(y))` at the probe points; exposed for plotting bases.
pub fn trunk_matrix(model: &DeepONetModel, y: &Matrix) -> Result<Matrix> {
    assemble_phi(&model.trunk, y)
}
