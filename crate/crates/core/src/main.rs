use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ratiofit::asymptotics::{self, ReportOptions, ScoreMode, TheoryProblem};
use ratiofit::harness::{
    self, generate_data, make_ground_truth, write_results, IcaGroundTruth, NoisePolicy, SweepConfig,
};
use ratiofit::models::{ica_true_c, ParamVector};
use ratiofit::noise::{AuxiliarySpec, Sampler};
use ratiofit::objective::{objective_value, EstimationProblem};
use ratiofit::optimizer::{maximize, OptimizerConfig};
use ratiofit::rng::{derive_seed, stream};
use ratiofit::{Error, NonlinearityKind, Result, Samples};

#[derive(Parser)]
#[command(name = "ratiofit", version, about = "Density-ratio estimators for unnormalized models")]
struct Cli {
    /// JSON file whose values override command-line flags. Keys are flag names
    /// with underscores; a nested object under the subcommand name is used if present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fast invariant suite; exit code 1 on any failure.
    Verify,
    /// Sample ICA data and write it as CSV, with the ground truth as JSON.
    GenData(GenDataArgs),
    /// Fit an ICA model to a data CSV.
    Estimate(EstimateArgs),
    /// Write the asymptotic covariance report for one kind.
    Predict(PredictArgs),
    /// Print the optimal data/noise ratio.
    GammaOpt(GammaOptArgs),
    /// Sweep the sample size at N_n = N_d.
    SweepN(SweepNArgs),
    /// Sweep the data/noise ratio at a fixed total budget.
    SweepGamma(SweepGammaArgs),
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct TruthArgs {
    /// Shape of the generalized Gaussian sources (1 super-Gaussian, 2 Gaussian).
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Seed of the random mixing matrix.
    #[arg(long, default_value_t = 1)]
    truth_seed: u64,
    /// Ground-truth JSON; overrides alpha, dim and truth seed.
    #[arg(long)]
    truth: Option<PathBuf>,
}

impl TruthArgs {
    fn load(&self) -> Result<IcaGroundTruth> {
        match &self.truth {
            Some(p) => read_json(p),
            None => make_ground_truth(self.dim, self.alpha, self.truth_seed),
        }
    }
}

#[derive(Args, Serialize, Deserialize)]
struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
    /// Where to write the ground truth; defaults to `<out>.truth.json`.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum InitPolicy {
    /// Symmetric whitening matrix of the data.
    Whiten,
    /// The ground truth perturbed by N(0, 0.1²); needs --truth.
    Truth,
}

#[derive(Args, Serialize, Deserialize)]
struct EstimateArgs {
    #[arg(long, default_value = "nc")]
    kind: NonlinearityKind,
    #[arg(long)]
    data: PathBuf,
    /// Ratio N_d / N_n.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "fit-gaussian")]
    noise: NoisePolicy,
    #[arg(long, value_enum, default_value = "whiten")]
    init: InitPolicy,
    /// Ground-truth JSON, used for error reporting and the truth-based policies.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
    /// Optional CSV of the optimization trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct PredictArgs {
    #[arg(long, default_value = "nc")]
    kind: NonlinearityKind,
    #[command(flatten)]
    #[serde(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Monte-Carlo sample size.
    #[arg(long, default_value_t = 1_000_000)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fit-gaussian")]
    noise: NoisePolicy,
    /// Data sample sizes for the predicted MSE.
    #[arg(long, value_delimiter = ',', default_value = "500,2000,8000")]
    n_d: Vec<usize>,
    /// Base sample size of the divergence check; 0 skips it.
    #[arg(long, default_value_t = 100_000)]
    divergence_mc: usize,
    /// Drop the normalizing constant from the score (requires known c).
    #[arg(long)]
    known_c: bool,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize)]
struct GammaOptArgs {
    #[arg(long, default_value = "nc")]
    kind: NonlinearityKind,
    #[command(flatten)]
    #[serde(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 1_000_000)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fit-gaussian")]
    noise: NoisePolicy,
    #[arg(long, default_value_t = 100_000)]
    divergence_mc: usize,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "nc,invis,invpo,is,po")]
    kinds: Vec<NonlinearityKind>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    truth_seed: u64,
    /// Root seed of every trial.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value = "fit-gaussian")]
    noise: NoisePolicy,
    #[arg(long, default_value_t = 0.1)]
    init_sigma: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Monte-Carlo size of the theory line; 0 disables it.
    #[arg(long, default_value_t = 1_000_000)]
    theory_mc: usize,
    #[arg(long, default_value_t = 100_000)]
    divergence_mc: usize,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

impl SweepArgs {
    fn config(&self) -> SweepConfig {
        SweepConfig {
            alpha: self.alpha,
            dim: self.dim,
            truth_seed: self.truth_seed,
            root_seed: self.seed,
            kinds: self.kinds.clone(),
            trials: self.trials,
            noise_policy: self.noise,
            init_sigma: self.init_sigma,
            optimizer: OptimizerConfig {
                max_iters: self.max_iters,
                grad_tol: self.grad_tol,
                ..Default::default()
            },
            theory_mc: self.theory_mc,
            divergence_mc: self.divergence_mc,
        }
    }
}

#[derive(Args, Serialize, Deserialize)]
struct SweepNArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,2000,8000")]
    n_d: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    sweep: SweepArgs,
}

#[derive(Args, Serialize, Deserialize)]
struct SweepGammaArgs {
    #[arg(long, default_value_t = 8000)]
    n_total: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1,2,4,8")]
    gammas: Vec<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    sweep: SweepArgs,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Overlays values from the config file onto parsed arguments: top-level keys
/// first, then the object stored under the subcommand name.
fn apply_config<T: Serialize + DeserializeOwned>(args: T, config: Option<&serde_json::Value>, name: &str) -> Result<T> {
    let Some(config) = config else { return Ok(args) };
    let Some(top) = config.as_object() else {
        return Err(Error::InvalidInput("config file must hold a JSON object".into()));
    };
    let mut value = serde_json::to_value(args).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let fields = value.as_object_mut().expect("arguments serialize to an object");
    let nested = top.get(name).and_then(|v| v.as_object());
    let layers = std::iter::once(top).chain(nested);
    for layer in layers {
        for (key, v) in layer {
            let key = key.replace('-', "_");
            if fields.contains_key(&key) {
                fields.insert(key, v.clone());
            } else if !v.is_object() {
                eprintln!("warning: config key '{key}' does not apply to {name}");
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("config: {e}")))
}

fn read_data(path: &Path) -> Result<Samples> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let dim = reader.headers().map_err(csv_err)?.len();
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("{}: row {}: '{field}' is not a number", path.display(), line + 1))
            })?;
            data.push(v);
        }
    }
    Samples::from_vec(dim, data)
}

fn write_data(path: &Path, data: &Samples) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record((0..data.dim()).map(|i| format!("x{i}"))).map_err(csv_err)?;
    for row in data.rows() {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let truth = args.truth.load()?;
    let data = generate_data(&truth, args.n, args.seed)?;
    write_data(&args.out, &data)?;
    let truth_out = args.truth_out.unwrap_or_else(|| args.out.with_extension("truth.json"));
    write_json(&truth_out, &truth)?;
    println!("wrote {} samples to {} and the ground truth to {}", args.n, args.out.display(), truth_out.display());
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    kind: NonlinearityKind,
    alpha: f64,
    dim: usize,
    gamma: f64,
    n_data: usize,
    n_noise: usize,
    seed: u64,
    #[serde(rename = "B_hat")]
    b_hat: Vec<Vec<f64>>,
    c_hat: f64,
    /// Exact log-normalizer at `B_hat`, for comparison with `c_hat`.
    c_exact: f64,
    objective: f64,
    status: String,
    iterations: usize,
    sq_error: Option<f64>,
    c_star: Option<f64>,
}

fn whitening(data: &Samples) -> Result<DMatrix<f64>> {
    let AuxiliarySpec::Gaussian(g) = ratiofit::noise::fit_gaussian(data)? else {
        unreachable!("fit_gaussian returns a Gaussian");
    };
    let eig = SymmetricEigen::new(g.cov().clone());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    if !(args.gamma > 0.0 && args.gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {}", args.gamma)));
    }
    let data = read_data(&args.data)?;
    let dim = data.dim();
    let n_noise = ((data.len() as f64 / args.gamma).round() as usize).max(1);
    let truth: Option<IcaGroundTruth> = args.truth.as_deref().map(read_json).transpose()?;
    if let Some(t) = &truth {
        if t.dim() != dim || t.alpha != args.alpha {
            return Err(Error::InvalidInput("ground truth does not match the data dimension or alpha".into()));
        }
    }
    let aux = match (args.noise, &truth) {
        (NoisePolicy::FitGaussian, _) => ratiofit::noise::fit_gaussian(&data)?,
        (NoisePolicy::GengaussTruth, Some(t)) => t.data_distribution()?,
        (NoisePolicy::GengaussTruth, None) => {
            return Err(Error::InvalidInput("--noise gengauss-truth needs --truth".into()))
        }
    };
    let noise = aux.sample(n_noise, derive_seed(args.seed, &[2]));
    let n_data = data.len();
    let model = Arc::new(ratiofit::models::IcaModel::new(dim, args.alpha)?);
    let problem = EstimationProblem::new(model, args.kind, data, noise, &aux)?;

    let theta0 = match (args.init, &truth) {
        (InitPolicy::Whiten, _) => {
            let b0 = whitening(problem.data())?;
            let c0 = ica_true_c(&b0, args.alpha)?;
            ParamVector::new(b0.transpose().as_slice().to_vec(), c0)
        }
        (InitPolicy::Truth, Some(t)) => {
            use rand::Rng;
            let mut rng = stream(derive_seed(args.seed, &[3]));
            let star = t.theta_star();
            ParamVector::from_vec(
                star.as_slice()
                    .iter()
                    .map(|v| v + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            )?
        }
        (InitPolicy::Truth, None) => return Err(Error::InvalidInput("--init truth needs --truth".into())),
    };
    let config = OptimizerConfig {
        max_iters: args.max_iters,
        grad_tol: args.grad_tol,
        ..Default::default()
    };
    let (theta, trace) = maximize(&problem, DVector::from(theta0), &config)?;
    if let Some(path) = &args.trace {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        trace.write_csv(BufWriter::new(file)).map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
    }
    let theta = ParamVector::from(&theta);
    let b_hat = DMatrix::from_row_slice(dim, dim, theta.phi());
    let report = FitReport {
        kind: args.kind,
        alpha: args.alpha,
        dim,
        gamma: args.gamma,
        n_data,
        n_noise,
        seed: args.seed,
        b_hat: b_hat.row_iter().map(|r| r.iter().copied().collect()).collect(),
        c_hat: theta.c(),
        c_exact: ica_true_c(&b_hat, args.alpha).unwrap_or(f64::NAN),
        objective: objective_value(&problem, &theta)?,
        status: trace.status.to_string(),
        iterations: trace.iterations(),
        sq_error: truth.as_ref().map(|t| theta.squared_distance(&t.theta_star())),
        c_star: truth.as_ref().map(|t| t.c_star),
    };
    write_json(&args.out, &report)?;
    println!(
        "{}: {} after {} iterations, c_hat = {:.6}; wrote {}",
        args.kind,
        trace.status,
        trace.iterations(),
        theta.c(),
        args.out.display()
    );
    Ok(())
}

fn theory_problem(truth: &IcaGroundTruth, noise: NoisePolicy, score: ScoreMode) -> Result<TheoryProblem> {
    TheoryProblem::new(
        Arc::new(truth.model()?),
        truth.theta_star(),
        Arc::new(noise.population(truth)?),
        score,
    )
}

fn predict(args: PredictArgs) -> Result<()> {
    let truth = args.truth.load()?;
    let score = if args.known_c {
        ScoreMode::FisherOnly
    } else {
        ScoreMode::Augmented
    };
    let problem = theory_problem(&truth, args.noise, score)?;
    let pd = truth.data_distribution()?;
    let report = asymptotics::report(
        &problem,
        &pd,
        &args.kind,
        &ReportOptions {
            gamma: args.gamma,
            n_mc: args.mc,
            seed: args.seed,
            n_d: args.n_d.clone(),
            divergence_n_mc: (args.divergence_mc > 0).then_some(args.divergence_mc),
        },
    )?;
    write_json(&args.out, &report)?;
    match report.trace_sigma {
        Some(t) => println!("{}: tr(Sigma) = {t:.6}; wrote {}", args.kind, args.out.display()),
        None => println!("{}: asymptotic covariance diverges; wrote {}", args.kind, args.out.display()),
    }
    Ok(())
}

fn gamma_opt(args: GammaOptArgs) -> Result<()> {
    let truth = args.truth.load()?;
    let problem = theory_problem(&truth, args.noise, ScoreMode::Augmented)?;
    let pd = truth.data_distribution()?;
    let report = asymptotics::report(
        &problem,
        &pd,
        &args.kind,
        &ReportOptions {
            gamma: 1.0,
            n_mc: args.mc,
            seed: args.seed,
            n_d: Vec::new(),
            divergence_n_mc: (args.divergence_mc > 0).then_some(args.divergence_mc),
        },
    )?;
    match report.gamma_hat {
        Some(g) => println!("{g}"),
        None => println!("diverged"),
    }
    Ok(())
}

fn finish_sweep(table: harness::ResultsTable, out: &Path) -> Result<()> {
    write_results(&table, out)?;
    for row in &table.rows {
        println!(
            "{:<6} N_d={:<6} N_n={:<6} gamma={:<8} median={:.4e} theory={} failed={}",
            row.kind.to_string(),
            row.n_d,
            row.n_n,
            row.gamma,
            row.median_mse,
            row.theory_mse.map_or("-".to_string(), |t| format!("{t:.4e}")),
            row.failed_trials
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let config: Option<serde_json::Value> = cli.config.as_deref().map(read_json).transpose()?;
    let config = config.as_ref();
    match cli.command {
        Command::Verify => {
            let checks = ratiofit::verify::run_verify();
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::GenData(a) => gen_data(apply_config(a, config, "gen-data")?)?,
        Command::Estimate(a) => estimate(apply_config(a, config, "estimate")?)?,
        Command::Predict(a) => predict(apply_config(a, config, "predict")?)?,
        Command::GammaOpt(a) => gamma_opt(apply_config(a, config, "gamma-opt")?)?,
        Command::SweepN(a) => {
            let a = apply_config(a, config, "sweep-n")?;
            finish_sweep(harness::sweep_sample_size(&a.sweep.config(), &a.n_d)?, &a.sweep.out)?
        }
        Command::SweepGamma(a) => {
            let a = apply_config(a, config, "sweep-gamma")?;
            finish_sweep(harness::sweep_gamma(&a.sweep.config(), a.n_total, &a.gammas)?, &a.sweep.out)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
