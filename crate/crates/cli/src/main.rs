use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use operon::construct::verify_zero_loss_pipeline;
use operon::data::{
    example3_triplets, gen_example1, gen_example2, gen_example3, linspace, load_dataset, save_dataset, split_dataset,
};
use operon::deeponet::{load_model, save_model};
use operon::eval::{
    evaluate, generalization_sweep, mix_seed, write_error_map_csv, write_histogram_csv, write_sweep_csv, SweepAxis,
    SweepConfig,
};
use operon::train::{train, write_trace_csv};
use operon::{
    Activation, BranchSolver, DeepONetModel, LrSchedule, Method, OperatorDataset, TrainConfig,
};

#[derive(Parser)]
#[command(name = "operon", version, about = "DeepONet training with two-step trunk/branch fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Darcy-flow dataset.
    Generate(GenerateArgs),
    /// Train a DeepONet on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Build the interpolating trunk and check the zero-loss pipeline.
    Certify(CertifyArgs),
    /// Sweep one size parameter and report test errors.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    Ex1,
    Ex2,
    Ex3,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    example: Example,
    #[arg(long, default_value_t = 33)]
    grid_n: usize,
    /// Number of samples; defaults to 1000 (ex1, ex2) or 100000 (ex3).
    #[arg(long)]
    k: Option<usize>,
    /// Parameter interval `lo,hi` for ex1/ex2 (equidistant values).
    #[arg(long, value_parser = parse_range)]
    range: Option<(f64, f64)>,
    /// Fraction of samples in the training split.
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Van,
    #[value(name = "2st")]
    TwoStep,
    #[value(name = "2st-noqr")]
    TwoStepNoQr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Van => Method::Van,
            MethodArg::TwoStep => Method::TwoStep,
            MethodArg::TwoStepNoQr => Method::TwoStepNoQr,
        }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Overrides the config's method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's dataset path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truncate: Option<f64>,
    /// Test-sample index for an error-map CSV; repeatable.
    #[arg(long)]
    map_index: Vec<usize>,
}

#[derive(clap::Args)]
struct CertifyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trunk width N.
    #[arg(long = "N", visible_alias = "n")]
    n_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err("need lo < hi".into())
    }
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_lr() -> f64 {
    1e-3
}

fn default_a_init_scale() -> f64 {
    0.1
}

/// Training run description: architectures plus the training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Full trunk architecture `(d_y, …, N)`.
    trunk_arch: Vec<usize>,
    /// Full branch architecture `(m_x, …, N+1)`.
    branch_arch: Vec<usize>,
    #[serde(default = "default_activation")]
    trunk_activation: Activation,
    #[serde(default = "default_activation")]
    branch_activation: Activation,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    iters_trunk: u64,
    #[serde(default)]
    iters_branch: u64,
    #[serde(default)]
    iters_mono: u64,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default)]
    schedule: LrSchedule,
    #[serde(default = "default_a_init_scale")]
    a_init_scale: f64,
    #[serde(default)]
    ls_refit_every: u64,
    #[serde(default)]
    branch_solver: BranchSolver,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

impl RunConfig {
    fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            iters_trunk: self.iters_trunk,
            iters_branch: self.iters_branch,
            iters_mono: self.iters_mono,
            lr: self.lr,
            schedule: self.schedule,
            seed: mix_seed(&[self.seed, 1]),
            a_init_scale: self.a_init_scale,
            ls_refit_every: self.ls_refit_every,
            branch_solver: self.branch_solver,
        }
    }
}

/// Usage and validation problems exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<operon::Error> for Failure {
    fn from(e: operon::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

type CmdResult = Result<(), Failure>;

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    if args.grid_n < 3 {
        return Err(usage(format!("--grid-n must be at least 3, got {}", args.grid_n)));
    }
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(usage("--train-fraction must lie in (0, 1)"));
    }
    let ds = match args.example {
        Example::Ex1 => {
            let (lo, hi) = args.range.unwrap_or((1.0, 1000.0));
            gen_example1(&linspace(lo, hi, args.k.unwrap_or(1000)), args.grid_n)
        }
        Example::Ex2 => {
            let (lo, hi) = args.range.unwrap_or((0.01, 10.0));
            gen_example2(&linspace(lo, hi, args.k.unwrap_or(1000)), args.grid_n)
        }
        Example::Ex3 => {
            if args.range.is_some() {
                return Err(usage("--range does not apply to ex3"));
            }
            example3_triplets(args.k.unwrap_or(100_000), args.seed)
                .and_then(|t| gen_example3(&t, args.grid_n))
        }
    };
    let ds = ds.map_err(|e| match e {
        operon::DataError::InvalidParameter(_) => usage(e),
        other => Failure::Runtime(other.into()),
    })?;
    let ds = split_dataset(&ds, args.train_fraction, args.seed).map_err(|e| Failure::Runtime(e.into()))?;
    create_out(&args.out)?;
    save_dataset(&ds, &args.out).map_err(|e| Failure::Runtime(e.into()))?;
    println!(
        "{}: K={} (train {}, test {}), m_x={}, m_y={}, d_y={} -> {}",
        ds.name,
        ds.k(),
        ds.split.train.len(),
        ds.split.test.len(),
        ds.m_x(),
        ds.m_y(),
        ds.d_y(),
        args.out.display()
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<OperatorDataset, Failure> {
    require_dir(path, "dataset")?;
    load_dataset(path).map_err(|e| Failure::Runtime(anyhow::Error::new(e).context(format!("loading {}", path.display()))))
}

/// Writes `report` as JSON, moving the wall-clock time to `timing.json` so
/// that `report.json` is reproducible byte for byte.
fn write_report<T: Serialize>(report: &T, out: &Path) -> Result<(), Failure> {
    let mut value = serde_json::to_value(report).context("serializing report")?;
    if let Some(secs) = value.as_object_mut().and_then(|o| o.remove("wall_seconds")) {
        fs::write(out.join("timing.json"), serde_json::to_string_pretty(&serde_json::json!({ "wall_seconds": secs })).context("timing")?)
            .context("writing timing.json")?;
    }
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&value).context("serializing report")?)
        .context("writing report.json")?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg: RunConfig = read_json(&args.config)?;
    if let Some(m) = args.method {
        cfg.method = Some(m.into());
    }
    if let Some(d) = args.data {
        cfg.data = Some(d);
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let method = cfg.method.ok_or_else(|| usage("no method given (--method or config \"method\")"))?;
    let data_path = cfg.data.clone().ok_or_else(|| usage("no dataset given (--data or config \"data\")"))?;
    let out = cfg.out.clone().ok_or_else(|| usage("no output directory given (--out or config \"out\")"))?;
    let tcfg = cfg.train_config(method);
    tcfg.validate().map_err(usage)?;

    let data = load_data(&data_path)?;
    let train_set = data.train_subset();
    if cfg.trunk_arch.first() != Some(&train_set.d_y()) || cfg.branch_arch.first() != Some(&train_set.m_x()) {
        return Err(usage(format!(
            "architecture inputs ({:?}, {:?}) do not match dataset (d_y = {}, m_x = {})",
            cfg.trunk_arch.first(),
            cfg.branch_arch.first(),
            train_set.d_y(),
            train_set.m_x()
        )));
    }
    let model = DeepONetModel::init(
        &cfg.trunk_arch,
        &cfg.branch_arch,
        cfg.trunk_activation,
        cfg.branch_activation,
        mix_seed(&[cfg.seed, 0]),
    )
    .map_err(usage)?;

    let (trained, report) = train(&train_set, &model, &tcfg)?;
    create_out(&out)?;
    save_model(&trained, &out)?;
    write_report(&report, &out)?;
    match method {
        Method::Van => write_trace_csv(&report.loss_trace, out.join("trace_mono.csv"))?,
        _ => {
            write_trace_csv(&report.loss_trace, out.join("trace_trunk.csv"))?;
            write_trace_csv(&report.branch_trace, out.join("trace_branch.csv"))?;
        }
    }
    println!(
        "{}: final monolithic loss {:e}{} -> {}",
        report.method,
        report.final_monolithic_loss,
        report.final_trunk_loss.map(|l| format!(", trunk loss {l:e}")).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    require_dir(&args.model, "model")?;
    if let Some(m) = args.truncate {
        if !(m > 0.0) {
            return Err(usage("--truncate must be positive"));
        }
    }
    let model = load_model(&args.model)?;
    let data = load_data(&args.data)?;
    let test = if data.split.test.is_empty() { data.clone() } else { data.test_subset() };
    if let Some(&bad) = args.map_index.iter().find(|&&i| i >= test.k()) {
        return Err(usage(format!("--map-index {bad} out of range for {} samples", test.k())));
    }
    let report = evaluate(&model, &test, args.truncate)?;
    create_out(&args.out)?;
    write_report(&report, &args.out)?;
    write_histogram_csv(&report, args.out.join("histogram.csv"))?;
    for &i in &args.map_index {
        write_error_map_csv(&model, &test, i, args.out.join(format!("error_map_{i}.csv")))?;
    }
    println!(
        "{} samples: mean relative error {:e} (std {:e}), mean optimal {:e}",
        report.errors.len(),
        report.mean_relative_error,
        report.std_relative_error,
        report.mean_optimal_error
    );
    Ok(())
}

fn cmd_certify(args: CertifyArgs) -> CmdResult {
    if args.n_width == 0 {
        return Err(usage("--N must be at least 1"));
    }
    let data = load_data(&args.data)?.train_subset();
    let cert = verify_zero_loss_pipeline(&data, args.n_width, args.seed)?;
    create_out(&args.out)?;
    let text = serde_json::to_string_pretty(&cert).context("serializing certificate")?;
    fs::write(args.out.join("certificate.json"), &text).context("writing certificate.json")?;
    println!("{text}");
    if cert.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("certificate failed")))
    }
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let cfg: SweepConfig = read_json(&args.config)?;
    cfg.train.validate().map_err(usage)?;
    if args.replicates < 3 {
        return Err(usage("--replicates must be at least 3"));
    }
    if args.values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--values must be strictly increasing"));
    }
    let rows = generalization_sweep(&cfg, args.axis, &args.values, args.replicates)?;
    create_out(&args.out)?;
    write_sweep_csv(&rows, args.out.join("sweep.csv"))?;
    for r in &rows {
        println!("{}={}: test error {:e} ± {:e}", r.axis, r.value, r.mean_test_error, r.std_test_error);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
