//! Experiments on the ICA model: ground truth, single trials and sweeps over
//! the sample size or the data/noise ratio.
//!
//! Every random quantity is derived from explicit seeds. Trial `t` of cell `k`
//! uses `derive_seed(root, [k, t])` for every kind, so kinds see identical data,
//! noise and initial perturbations.

mod results;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{self, DivergenceFlags, ScoreMode, TheoryProblem, WeightedPoints};
use crate::error::{Error, Result};
use crate::family::NonlinearityKind;
use crate::models::{ica_true_c, IcaModel, ParamVector};
use crate::noise::{fit_gaussian, gen_gaussian_sample, AuxiliarySpec, Sampler};
use crate::objective::EstimationProblem;
use crate::optimizer::{maximize, OptimizerConfig, Status};
use crate::rng::{derive_seed, stream};
use crate::samples::Samples;

pub use results::{read_results, write_results, ResultRow, ResultsTable, SweepMetadata, KindTheory, TrialRecord};

pub const MAX_CONDITION: f64 = 20.0;
pub const MAX_ATTEMPTS: usize = 100;

/// Mixing matrix `A`, its inverse `B* = A⁻¹` and the log-normalizer `c*`.
#[derive(Clone, Debug, PartialEq)]
pub struct IcaGroundTruth {
    pub alpha: f64,
    pub a: DMatrix<f64>,
    pub b_star: DMatrix<f64>,
    pub c_star: f64,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct TruthWire {
    dim: usize,
    alpha: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    seed: Option<u64>,
}

impl Serialize for IcaGroundTruth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TruthWire {
            dim: self.dim(),
            alpha: self.alpha,
            a: self.a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            seed: self.seed,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for IcaGroundTruth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = TruthWire::deserialize(d)?;
        if w.a.len() != w.dim || w.a.iter().any(|r| r.len() != w.dim) {
            return Err(D::Error::custom(format!("A must be {0}x{0}", w.dim)));
        }
        let a = DMatrix::from_row_iterator(w.dim, w.dim, w.a.into_iter().flatten());
        let mut truth = IcaGroundTruth::from_mixing(a, w.alpha).map_err(D::Error::custom)?;
        truth.seed = w.seed;
        Ok(truth)
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    sv.max() / sv.min()
}

impl IcaGroundTruth {
    pub fn from_mixing(a: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidInput("mixing matrix must be square and non-empty".into()));
        }
        let b_star = a.clone().try_inverse().ok_or(Error::Singular {
            what: "mixing matrix",
            cond: f64::INFINITY,
        })?;
        let c_star = ica_true_c(&b_star, alpha)?;
        Ok(Self {
            alpha,
            a,
            b_star,
            c_star,
            seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `(B* row-major, c*)`.
    pub fn theta_star(&self) -> ParamVector {
        ParamVector::new(self.b_star.transpose().as_slice().to_vec(), self.c_star)
    }

    pub fn model(&self) -> Result<IcaModel> {
        IcaModel::new(self.dim(), self.alpha)
    }

    /// The data density as an auxiliary density; equals the model at `θ*`.
    pub fn data_distribution(&self) -> Result<AuxiliarySpec> {
        AuxiliarySpec::gen_gauss(self.alpha, self.b_star.clone())
    }

    /// `N(0, AAᵀ)`, the large-sample limit of a Gaussian fitted to the data.
    pub fn population_gaussian(&self) -> Result<AuxiliarySpec> {
        AuxiliarySpec::gaussian(DVector::zeros(self.dim()), &self.a * self.a.transpose())
    }
}

/// Draws `A` with standard-normal entries until its condition number is at most 20.
pub fn make_ground_truth(dim: usize, alpha: f64, seed: u64) -> Result<IcaGroundTruth> {
    if dim == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    let mut rng = stream(seed);
    for _ in 0..MAX_ATTEMPTS {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if condition_number(&a) <= MAX_CONDITION {
            let mut truth = IcaGroundTruth::from_mixing(a, alpha)?;
            truth.seed = Some(seed);
            return Ok(truth);
        }
    }
    Err(Error::InvalidInput(format!(
        "no mixing matrix with condition number <= {MAX_CONDITION} in {MAX_ATTEMPTS} attempts"
    )))
}

/// `x = A s` with independent unit-variance generalized Gaussian sources.
pub fn generate_data(truth: &IcaGroundTruth, n: usize, seed: u64) -> Result<Samples> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let d = truth.dim();
    let s = gen_gaussian_sample(truth.alpha, n * d, seed)?;
    let mut out = Samples::zeros(n, d);
    for (i, src) in s.chunks_exact(d).enumerate() {
        let row = out.row_mut(i);
        for (r, v) in row.iter_mut().enumerate() {
            *v = (0..d).map(|c| truth.a[(r, c)] * src[c]).sum();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Gaussian with the sample mean and covariance of the data.
    FitGaussian,
    /// The data density itself.
    GengaussTruth,
}

impl NoisePolicy {
    pub fn build(self, truth: &IcaGroundTruth, data: &Samples) -> Result<AuxiliarySpec> {
        match self {
            NoisePolicy::FitGaussian => fit_gaussian(data),
            NoisePolicy::GengaussTruth => truth.data_distribution(),
        }
    }

    /// The noise density the policy converges to, used for theory predictions.
    pub fn population(self, truth: &IcaGroundTruth) -> Result<AuxiliarySpec> {
        match self {
            NoisePolicy::FitGaussian => truth.population_gaussian(),
            NoisePolicy::GengaussTruth => truth.data_distribution(),
        }
    }
}

impl std::str::FromStr for NoisePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit-gaussian" | "fit_gaussian" => Ok(NoisePolicy::FitGaussian),
            "gengauss-truth" | "gengauss_truth" => Ok(NoisePolicy::GengaussTruth),
            other => Err(Error::InvalidInput(format!("unknown noise policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub alpha: f64,
    pub dim: usize,
    pub truth_seed: u64,
    pub kind: NonlinearityKind,
    pub n_data: usize,
    pub n_noise: usize,
    pub noise_policy: NoisePolicy,
    /// Standard deviation of the perturbation of `θ*` used as the start.
    pub init_sigma: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_data == 0 || self.n_noise == 0 {
            return Err(Error::InvalidInput("sample sizes must be at least 1".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::InvalidInput("init_sigma must be non-negative".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub theta_hat: ParamVector,
    /// `‖θ̂ − θ*‖²` over all parameters including `c`.
    pub sq_error: f64,
    pub c_error: f64,
    pub status: Status,
    pub iterations: usize,
    /// Seconds; excluded from every persisted artifact.
    #[serde(skip)]
    pub wall_time: f64,
    pub seed: u64,
}

pub fn run_trial(config: &TrialConfig) -> Result<TrialResult> {
    let truth = make_ground_truth(config.dim, config.alpha, config.truth_seed)?;
    run_trial_with_truth(&truth, config)
}

/// As [`run_trial`] with the ground truth already built.
pub fn run_trial_with_truth(truth: &IcaGroundTruth, config: &TrialConfig) -> Result<TrialResult> {
    config.validate()?;
    if truth.dim() != config.dim || truth.alpha != config.alpha {
        return Err(Error::InvalidInput("ground truth does not match the trial configuration".into()));
    }
    let start = Instant::now();
    let data = generate_data(truth, config.n_data, derive_seed(config.seed, &[1]))?;
    let aux = config.noise_policy.build(truth, &data)?;
    let noise = aux.sample(config.n_noise, derive_seed(config.seed, &[2]));
    let problem = EstimationProblem::new(Arc::new(truth.model()?), config.kind, data, noise, &aux)?;

    let theta_star = truth.theta_star();
    let mut rng = stream(derive_seed(config.seed, &[3]));
    let theta0 = DVector::from_iterator(
        theta_star.dim(),
        theta_star
            .as_slice()
            .iter()
            .map(|t| t + config.init_sigma * rng.sample::<f64, _>(StandardNormal)),
    );
    let (theta_hat, status, iterations) = match maximize(&problem, theta0.clone(), &config.optimizer) {
        Ok((theta, trace)) => (theta, trace.status, trace.iterations()),
        Err(Error::NonFiniteStart) => (theta0, Status::Diverged, 0),
        Err(e) => return Err(e),
    };
    let theta_hat = ParamVector::from(&theta_hat);
    Ok(TrialResult {
        sq_error: theta_hat.squared_distance(&theta_star),
        c_error: (theta_hat.c() - theta_star.c()).abs(),
        theta_hat,
        status,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        seed: config.seed,
    })
}

/// Settings shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub alpha: f64,
    pub dim: usize,
    pub truth_seed: u64,
    pub root_seed: u64,
    pub kinds: Vec<NonlinearityKind>,
    pub trials: usize,
    pub noise_policy: NoisePolicy,
    pub init_sigma: f64,
    pub optimizer: OptimizerConfig,
    /// Monte-Carlo sample size for the theory line; 0 disables it.
    pub theory_mc: usize,
    /// Base sample size of the divergence check.
    pub divergence_mc: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            dim: 2,
            truth_seed: 1,
            root_seed: 0,
            kinds: NonlinearityKind::ALL.to_vec(),
            trials: 20,
            noise_policy: NoisePolicy::FitGaussian,
            init_sigma: 0.1,
            optimizer: OptimizerConfig::default(),
            theory_mc: 1_000_000,
            divergence_mc: 100_000,
        }
    }
}

struct Cell {
    index: usize,
    n_d: usize,
    n_n: usize,
    gamma: f64,
}

fn theory_for_kinds(config: &SweepConfig, truth: &IcaGroundTruth) -> Result<Vec<(KindTheory, Option<asymptotics::BuildingBlocks>)>> {
    if config.theory_mc == 0 {
        return Ok(Vec::new());
    }
    let problem = TheoryProblem::new(
        Arc::new(truth.model()?),
        truth.theta_star(),
        Arc::new(config.noise_policy.population(truth)?),
        ScoreMode::Augmented,
    )?;
    let pd = truth.data_distribution()?;
    let points = WeightedPoints::sample(&pd, config.theory_mc, derive_seed(config.root_seed, &[u64::MAX]));
    config
        .kinds
        .iter()
        .map(|&kind| {
            let flags = if config.divergence_mc > 0 {
                asymptotics::divergence_check(
                    &problem,
                    &pd,
                    &kind,
                    config.divergence_mc,
                    derive_seed(config.root_seed, &[u64::MAX - 1]),
                )?
            } else {
                DivergenceFlags::default()
            };
            let bb = asymptotics::building_blocks(&problem, &kind, &points)?;
            let usable = !flags.diverged() && bb.is_finite();
            let gamma_hat = if usable { bb.optimal_gamma().ok() } else { None };
            Ok((
                KindTheory {
                    kind,
                    divergence: DivergenceFlags {
                        a_gamma: flags.a_gamma || !bb.is_finite(),
                        ..flags
                    },
                    gamma_hat,
                },
                usable.then_some(bb),
            ))
        })
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_cells(
    config: &SweepConfig,
    cells: &[Cell],
    theory: impl Fn(&asymptotics::BuildingBlocks, &Cell) -> Option<f64>,
    mut metadata: SweepMetadata,
) -> Result<ResultsTable> {
    if config.trials == 0 {
        return Err(Error::InvalidInput("at least one trial per cell is required".into()));
    }
    let truth = make_ground_truth(config.dim, config.alpha, config.truth_seed)?;
    let theories = theory_for_kinds(config, &truth)?;

    let jobs: Vec<(NonlinearityKind, usize, usize)> = config
        .kinds
        .iter()
        .flat_map(|&k| (0..cells.len()).flat_map(move |c| (0..config.trials).map(move |t| (k, c, t))))
        .collect();
    let outcomes: Vec<Result<TrialResult>> = jobs
        .par_iter()
        .map(|&(kind, c, t)| {
            let cell = &cells[c];
            run_trial_with_truth(
                &truth,
                &TrialConfig {
                    alpha: config.alpha,
                    dim: config.dim,
                    truth_seed: config.truth_seed,
                    kind,
                    n_data: cell.n_d,
                    n_noise: cell.n_n,
                    noise_policy: config.noise_policy,
                    init_sigma: config.init_sigma,
                    optimizer: config.optimizer.clone(),
                    seed: derive_seed(config.root_seed, &[cell.index as u64, t as u64]),
                },
            )
        })
        .collect();

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ki, &kind) in config.kinds.iter().enumerate() {
        let (kt, bb) = match theories.get(ki) {
            Some((kt, bb)) => (Some(kt), bb.as_ref()),
            None => (None, None),
        };
        for (ci, cell) in cells.iter().enumerate() {
            let base = (ki * cells.len() + ci) * config.trials;
            let mut errors = Vec::with_capacity(config.trials);
            let mut failed = 0;
            for (t, outcome) in outcomes[base..base + config.trials].iter().enumerate() {
                let r = match outcome {
                    Ok(r) => r,
                    Err(e) => return Err(Error::InvalidInput(format!("{kind} trial failed: {e}"))),
                };
                if r.status != Status::Converged {
                    failed += 1;
                }
                errors.push(r.sq_error);
                records.push(TrialRecord {
                    kind,
                    n_d: cell.n_d,
                    n_n: cell.n_n,
                    gamma: cell.gamma,
                    trial: t,
                    seed: r.seed,
                    sq_error: r.sq_error,
                    c_error: r.c_error,
                    status: r.status,
                    iterations: r.iterations,
                });
            }
            rows.push(ResultRow {
                kind,
                n_d: cell.n_d,
                n_n: cell.n_n,
                gamma: cell.gamma,
                trials: config.trials,
                median_mse: median(&errors),
                mean_mse: errors.iter().sum::<f64>() / errors.len() as f64,
                theory_mse: bb.and_then(|bb| theory(bb, cell)),
                diverged: kt.is_some_and(|k| k.divergence.diverged()),
                failed_trials: failed,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.n_d.cmp(&b.n_d))
            .then(a.gamma.total_cmp(&b.gamma))
    });
    records.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.n_d.cmp(&b.n_d))
            .then(a.gamma.total_cmp(&b.gamma))
            .then(a.trial.cmp(&b.trial))
    });
    metadata.theory = theories.into_iter().map(|(kt, _)| kt).collect();
    metadata.trials = records;
    Ok(ResultsTable {
        rows,
        metadata: Some(metadata),
    })
}

/// Trials at `N_n = N_d` for every `N_d` and kind, with the line `tr Σ(1)/N_d`.
pub fn sweep_sample_size(config: &SweepConfig, n_d_values: &[usize]) -> Result<ResultsTable> {
    if n_d_values.contains(&0) {
        return Err(Error::InvalidInput("sample sizes must be at least 1".into()));
    }
    let cells: Vec<Cell> = n_d_values
        .iter()
        .enumerate()
        .map(|(index, &n)| Cell {
            index,
            n_d: n,
            n_n: n,
            gamma: 1.0,
        })
        .collect();
    let metadata = SweepMetadata::new("sample_size", config.clone());
    run_cells(
        config,
        &cells,
        |bb, cell| {
            bb.sigma(1.0)
                .ok()
                .map(|s| asymptotics::predicted_mse(&s, cell.n_d))
                .filter(|v| v.is_finite())
        },
        metadata,
    )
}

/// Trials at a fixed total budget split as `N_d = round(N_tot·γ/(1+γ))`, with
/// the line `(1 + 1/γ)·tr Σ(γ)/N_tot`. Ratios leaving fewer than 10 samples on
/// either side are skipped and noted in the metadata.
pub fn sweep_gamma(config: &SweepConfig, n_total: usize, gammas: &[f64]) -> Result<ResultsTable> {
    let mut metadata = SweepMetadata::new("gamma", config.clone());
    metadata.n_total = Some(n_total);
    let mut cells = Vec::new();
    for (index, &gamma) in gammas.iter().enumerate() {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
        }
        let n_d = (n_total as f64 * gamma / (1.0 + gamma)).round() as usize;
        let n_n = n_total.saturating_sub(n_d);
        if n_d < 10 || n_n < 10 {
            metadata
                .notes
                .push(format!("gamma {gamma} skipped: N_d = {n_d}, N_n = {n_n}"));
            continue;
        }
        cells.push(Cell {
            index,
            n_d,
            n_n,
            gamma,
        });
    }
    run_cells(
        config,
        &cells,
        |bb, cell| {
            bb.sigma(cell.gamma)
                .ok()
                .map(|s| (1.0 + 1.0 / cell.gamma) * s.trace() / n_total as f64)
                .filter(|v| v.is_finite())
        },
        metadata,
    )
}
