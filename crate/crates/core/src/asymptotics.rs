//! Asymptotic covariance of the estimators and the quantities derived from it.
//!
//! With `ψ` the score of the model at the true parameters and expectations over
//! the data density `p_d`:
//!
//! ```text
//! ℐ   = E[g2'(q) ψψᵀ]          𝒜_γ = E[q g2'(q)² ψψᵀ]
//! 𝒜   = E[g2'(q)² ψψᵀ]         ℬ   = v vᵀ,  v = E[g2'(q) ψ]
//! Σ(γ) = ℐ⁻¹ [γ 𝒜_γ + 𝒜 − (1+γ) ℬ] ℐ⁻¹
//! ```
//!
//! where `q = p_d / p_n`. All weights are formed from `log g2'` and the log-ratio
//! so that extreme ratios overflow to `inf` rather than producing `NaN`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Nonlinearity;
use crate::models::{ParamVector, UnnormalizedModel};
use crate::noise::{LogDensity, Sampler};
use crate::quadrature;
use crate::rng::derive_seed;
use crate::samples::Samples;
use crate::summation::blocked_reduce;

/// Condition number above which ℐ is treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Which score vector enters the moment matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `(∂φ log p_m⁰, 1)`: the normalizing constant is estimated.
    Augmented,
    /// `∂φ log p_m⁰ + ∇c*(φ)`: the normalizing constant is known.
    FisherOnly,
}

/// Model, true parameters and auxiliary density.
#[derive(Clone)]
pub struct TheoryProblem {
    pub model: Arc<dyn UnnormalizedModel>,
    pub theta_star: ParamVector,
    pub aux: Arc<dyn LogDensity>,
    pub score: ScoreMode,
}

impl TheoryProblem {
    pub fn new(
        model: Arc<dyn UnnormalizedModel>,
        theta_star: ParamVector,
        aux: Arc<dyn LogDensity>,
        score: ScoreMode,
    ) -> Result<Self> {
        if theta_star.dim() != model.dim_phi() + 1 {
            return Err(Error::DimensionMismatch {
                expected: model.dim_phi() + 1,
                got: theta_star.dim(),
            });
        }
        if aux.dim() != model.dim_x() {
            return Err(Error::DimensionMismatch {
                expected: model.dim_x(),
                got: aux.dim(),
            });
        }
        model.check_phi(theta_star.phi())?;
        Ok(Self {
            model,
            theta_star,
            aux,
            score,
        })
    }

    pub fn with_score(&self, score: ScoreMode) -> Self {
        Self {
            score,
            ..self.clone()
        }
    }

    pub fn with_aux(&self, aux: Arc<dyn LogDensity>) -> Self {
        Self { aux, ..self.clone() }
    }

    pub fn score_dim(&self) -> usize {
        match self.score {
            ScoreMode::Augmented => self.model.dim_phi() + 1,
            ScoreMode::FisherOnly => self.model.dim_phi(),
        }
    }

    fn c_gradient(&self) -> Result<Option<Vec<f64>>> {
        match self.score {
            ScoreMode::Augmented => Ok(None),
            ScoreMode::FisherOnly => match self.model.true_c_gradient(self.theta_star.phi()) {
                Some(g) => g.map(Some),
                None => Err(Error::Misuse(
                    "score without the normalizing constant needs a model with a known c gradient".into(),
                )),
            },
        }
    }

    /// Log data density, i.e. the model at the true parameters.
    pub fn log_pd(&self, x: &[f64]) -> f64 {
        self.model.log_pm0(self.theta_star.phi(), x) + self.theta_star.c()
    }
}

/// Integration points for expectations under `p_d`.
#[derive(Clone, Debug)]
pub struct WeightedPoints {
    samples: Samples,
    /// Log weights including `p_d`; `None` means equal weights `1/n`.
    log_weights: Option<Vec<f64>>,
}

impl WeightedPoints {
    pub fn monte_carlo(samples: Samples) -> Self {
        Self {
            samples,
            log_weights: None,
        }
    }

    pub fn sample(pd: &dyn Sampler, n: usize, seed: u64) -> Self {
        Self::monte_carlo(pd.sample(n, seed))
    }

    /// Composite Simpson nodes on `[lo, hi]` weighted by `exp(log_pd)`.
    pub fn quadrature_1d(log_pd: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> Self {
        let (nodes, weights) = quadrature::simpson_rule(lo, hi, intervals);
        let log_weights = nodes.iter().zip(&weights).map(|(x, w)| w.ln() + log_pd(*x)).collect();
        Self {
            samples: Samples::from_vec(1, nodes).expect("one column"),
            log_weights: Some(log_weights),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The moment matrices at one noise density and nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildingBlocks {
    pub i: DMatrix<f64>,
    pub a_gamma: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl BuildingBlocks {
    pub fn is_finite(&self) -> bool {
        [&self.i, &self.a_gamma, &self.a, &self.b]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn sigma(&self, gamma: f64) -> Result<DMatrix<f64>> {
        sigma_g(&self.i, &self.a_gamma, &self.a, &self.b, gamma)
    }

    pub fn optimal_gamma(&self) -> Result<f64> {
        optimal_gamma(&self.i, &self.a_gamma, &self.a, &self.b)
    }
}

struct Acc {
    i: Vec<f64>,
    ag: Vec<f64>,
    a: Vec<f64>,
    v: Vec<f64>,
}

impl Acc {
    fn zeros(p: usize) -> Self {
        Self {
            i: vec![0.0; p * p],
            ag: vec![0.0; p * p],
            a: vec![0.0; p * p],
            v: vec![0.0; p],
        }
    }

    fn add(mut self, other: Acc) -> Acc {
        for (x, y) in [
            (&mut self.i, &other.i),
            (&mut self.ag, &other.ag),
            (&mut self.a, &other.a),
            (&mut self.v, &other.v),
        ] {
            x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
        self
    }
}

fn upper_to_symmetric(p: usize, upper: &[f64], scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |r, c| {
        let (j, k) = if r <= c { (r, c) } else { (c, r) };
        upper[j * p + k] * scale
    })
}

/// Computes ℐ, 𝒜_γ, 𝒜, ℬ in one pass over `points`.
pub fn building_blocks(
    problem: &TheoryProblem,
    nonlinearity: &dyn Nonlinearity,
    points: &WeightedPoints,
) -> Result<BuildingBlocks> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no integration points".into()));
    }
    if points.samples.dim() != problem.model.dim_x() {
        return Err(Error::DimensionMismatch {
            expected: problem.model.dim_x(),
            got: points.samples.dim(),
        });
    }
    let p = problem.score_dim();
    let dphi = problem.model.dim_phi();
    let c_grad = problem.c_gradient()?;
    let phi = problem.theta_star.phi();
    let c = problem.theta_star.c();
    let model = problem.model.as_ref();
    let aux = problem.aux.as_ref();

    let map = |start: usize, end: usize| {
        let mut acc = Acc::zeros(p);
        let mut psi = vec![0.0; dphi + 1];
        for idx in start..end {
            let x = points.samples.row(idx);
            let lp = model.log_pm0_and_score(phi, x, &mut psi[..dphi]);
            psi[dphi] = 1.0;
            if let Some(g) = &c_grad {
                psi[..dphi].iter_mut().zip(g).for_each(|(s, gc)| *s += gc);
            }
            let l = lp + c - aux.log_density(x);
            let lg = nonlinearity.log_g2_prime(l);
            let lw = points.log_weights.as_ref().map_or(0.0, |w| w[idx]);
            let wi = (lw + lg).exp();
            let wa = (lw + 2.0 * lg).exp();
            let wag = (lw + l + 2.0 * lg).exp();
            for j in 0..p {
                acc.v[j] += wi * psi[j];
                for k in j..p {
                    let pp = psi[j] * psi[k];
                    acc.i[j * p + k] += wi * pp;
                    acc.a[j * p + k] += wa * pp;
                    acc.ag[j * p + k] += wag * pp;
                }
            }
        }
        acc
    };
    let acc = blocked_reduce(points.len(), map, Acc::add).expect("non-empty");
    let scale = if points.log_weights.is_some() {
        1.0
    } else {
        1.0 / points.len() as f64
    };
    let v = DVector::from_iterator(p, acc.v.iter().map(|x| x * scale));
    let b = &v * v.transpose();
    Ok(BuildingBlocks {
        i: upper_to_symmetric(p, &acc.i, scale),
        a_gamma: upper_to_symmetric(p, &acc.ag, scale),
        a: upper_to_symmetric(p, &acc.a, scale),
        b,
        v,
    })
}

pub fn estimate_i(
    problem: &TheoryProblem,
    pd: &dyn Sampler,
    nonlinearity: &dyn Nonlinearity,
    n_mc: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    Ok(building_blocks(problem, nonlinearity, &WeightedPoints::sample(pd, n_mc, seed))?.i)
}

/// Returns `(𝒜_γ, 𝒜, ℬ)` from a single sample of `p_d`.
pub fn estimate_building_blocks(
    problem: &TheoryProblem,
    pd: &dyn Sampler,
    nonlinearity: &dyn Nonlinearity,
    n_mc: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let bb = building_blocks(problem, nonlinearity, &WeightedPoints::sample(pd, n_mc, seed))?;
    Ok((bb.a_gamma, bb.a, bb.b))
}

/// E_d[ψψᵀ] with the normalized score.
pub fn fisher_information(problem: &TheoryProblem, pd: &dyn Sampler, n_mc: usize, seed: u64) -> Result<DMatrix<f64>> {
    let fisher = problem.with_score(ScoreMode::FisherOnly);
    // g2' ≡ 1 turns ℐ into the plain second moment
    Ok(building_blocks(&fisher, &crate::family::NonlinearityKind::Is, &WeightedPoints::sample(pd, n_mc, seed))?.i)
}

/// Symmetric inverse with its 2-norm condition number.
pub fn symmetric_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, f64)> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Diverged(format!("{what} has non-finite entries")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let cond = max / min;
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular { what, cond });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok(((&inv + inv.transpose()) * 0.5, cond))
}

fn check_blocks(i: &DMatrix<f64>, ag: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let p = i.nrows();
    for m in [i, ag, a, b] {
        if m.nrows() != p || m.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: m.nrows(),
            });
        }
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::Diverged("moment matrix has non-finite entries".into()));
        }
    }
    Ok(())
}

/// Σ(γ) = ℐ⁻¹[γ𝒜_γ + 𝒜 − (1+γ)ℬ]ℐ⁻¹.
pub fn sigma_g(
    i: &DMatrix<f64>,
    a_gamma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    check_blocks(i, a_gamma, a, b)?;
    let (inv, _) = symmetric_inverse(i, "I")?;
    let middle = a_gamma * gamma + a - b * (1.0 + gamma);
    let s = &inv * middle * &inv;
    Ok((&s + s.transpose()) * 0.5)
}

pub fn predicted_mse(sigma: &DMatrix<f64>, n_d: usize) -> f64 {
    sigma.trace() / n_d as f64
}

/// `(1 + 1/γ)·tr Σ(γ)`: total-budget MSE up to the factor `1/N_total`.
pub fn gamma_objective(
    i: &DMatrix<f64>,
    a_gamma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
) -> Result<f64> {
    Ok((1.0 + 1.0 / gamma) * sigma_g(i, a_gamma, a, b, gamma)?.trace())
}

/// Minimizer of [`gamma_objective`] in closed form.
pub fn optimal_gamma(i: &DMatrix<f64>, a_gamma: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_blocks(i, a_gamma, a, b)?;
    let (inv, _) = symmetric_inverse(i, "I")?;
    let num = (&inv * (a - b) * &inv).trace();
    let den = (&inv * (a_gamma - b) * &inv).trace();
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::Diverged(format!(
            "optimal ratio undefined: numerator trace {num}, denominator trace {den}"
        )));
    }
    if num == den {
        return Ok(1.0);
    }
    Ok((num / den).sqrt())
}

/// Noise density minimizing the importance-sampling covariance:
/// proportional to `‖ℐ⁻¹ψ(x)‖·p_d(x)`.
#[derive(Clone)]
pub struct OptimalNoise {
    problem: TheoryProblem,
    i_inv: DMatrix<f64>,
    c_grad: Option<Vec<f64>>,
    log_norm: f64,
}

impl OptimalNoise {
    pub fn new(problem: &TheoryProblem, i: &DMatrix<f64>) -> Result<Self> {
        let (i_inv, _) = symmetric_inverse(i, "I")?;
        if i_inv.nrows() != problem.score_dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.score_dim(),
                got: i_inv.nrows(),
            });
        }
        Ok(Self {
            c_grad: problem.c_gradient()?,
            problem: problem.clone(),
            i_inv,
            log_norm: 0.0,
        })
    }

    /// `log‖ℐ⁻¹ψ(x)‖ + log p_d(x)` without normalization.
    pub fn log_density_unnormalized(&self, x: &[f64]) -> f64 {
        let dphi = self.problem.model.dim_phi();
        let mut psi = vec![0.0; dphi + 1];
        let lp = self.problem.model.log_pm0_and_score(self.problem.theta_star.phi(), x, &mut psi[..dphi]);
        psi[dphi] = 1.0;
        if let Some(g) = &self.c_grad {
            psi[..dphi].iter_mut().zip(g).for_each(|(s, gc)| *s += gc);
        }
        let psi = DVector::from_column_slice(&psi[..self.i_inv.nrows()]);
        (&self.i_inv * psi).norm().ln() + lp + self.problem.theta_star.c()
    }

    /// Normalizes a one-dimensional density by Simpson quadrature on `[lo, hi]`.
    pub fn normalized_1d(mut self, lo: f64, hi: f64, intervals: usize) -> Result<Self> {
        if self.problem.model.dim_x() != 1 {
            return Err(Error::Misuse("quadrature normalization is one-dimensional".into()));
        }
        self.log_norm = 0.0;
        let log_z = quadrature::log_integrate_exp(|x| self.log_density_unnormalized(&[x]), lo, hi, intervals);
        if !log_z.is_finite() {
            return Err(Error::Domain(format!("normalizer is {log_z}")));
        }
        self.log_norm = log_z;
        Ok(self)
    }
}

impl LogDensity for OptimalNoise {
    fn dim(&self) -> usize {
        self.problem.model.dim_x()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_unnormalized(x) - self.log_norm
    }
}

/// Per-matrix divergence verdicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceFlags {
    pub i: bool,
    pub a_gamma: bool,
    pub a: bool,
    pub b: bool,
}

impl DivergenceFlags {
    pub fn any(&self) -> bool {
        self.i || self.a_gamma || self.a || self.b
    }

    /// Headline verdict: the γ-dependent block, whose growth drives the MSE.
    pub fn diverged(&self) -> bool {
        self.a_gamma
    }
}

pub const DIVERGENCE_FACTOR: f64 = 1.5;
pub const DIVERGENCE_PAIRS: usize = 5;

/// Compares traces at `n_mc` and `4·n_mc` over independent seed pairs and
/// flags a matrix when the larger sample exceeds the smaller by more than
/// [`DIVERGENCE_FACTOR`] in a majority of pairs.
pub fn divergence_check(
    problem: &TheoryProblem,
    pd: &dyn Sampler,
    nonlinearity: &dyn Nonlinearity,
    n_mc: usize,
    seed: u64,
) -> Result<DivergenceFlags> {
    let mut votes = [0usize; 4];
    for pair in 0..DIVERGENCE_PAIRS as u64 {
        let small = building_blocks(problem, nonlinearity, &WeightedPoints::sample(pd, n_mc, derive_seed(seed, &[pair, 0])))?;
        let large = building_blocks(
            problem,
            nonlinearity,
            &WeightedPoints::sample(pd, 4 * n_mc, derive_seed(seed, &[pair, 1])),
        )?;
        let traces = |b: &BuildingBlocks| [b.i.trace(), b.a_gamma.trace(), b.a.trace(), b.b.trace()];
        for (k, (s, l)) in traces(&small).into_iter().zip(traces(&large)).enumerate() {
            if !l.is_finite() || !s.is_finite() || l > DIVERGENCE_FACTOR * s {
                votes[k] += 1;
            }
        }
    }
    let majority = |v: usize| 2 * v > DIVERGENCE_PAIRS;
    Ok(DivergenceFlags {
        i: majority(votes[0]),
        a_gamma: majority(votes[1]),
        a: majority(votes[2]),
        b: majority(votes[3]),
    })
}

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Option<Rows> {
    m.iter()
        .all(|x| x.is_finite())
        .then(|| m.row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub n_d: usize,
    pub mse: f64,
}

/// Serializable summary of one asymptotic analysis. Non-finite matrices and
/// values are reported as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub kind: String,
    pub score_mode: ScoreMode,
    pub gamma: f64,
    pub i_hat: Option<Rows>,
    pub a_gamma_hat: Option<Rows>,
    pub a_hat: Option<Rows>,
    pub b_hat: Option<Rows>,
    pub sigma_hat: Option<Rows>,
    pub condition_number: Option<f64>,
    pub trace_sigma: Option<f64>,
    pub predicted_mse: Vec<MsePoint>,
    pub gamma_hat: Option<f64>,
    pub diverged: DivergenceFlags,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub gamma: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub n_d: Vec<usize>,
    /// Base sample size for the divergence check; `None` skips it.
    pub divergence_n_mc: Option<usize>,
}

pub fn report(
    problem: &TheoryProblem,
    pd: &dyn Sampler,
    nonlinearity: &dyn Nonlinearity,
    options: &ReportOptions,
) -> Result<AsymptoticReport> {
    let bb = building_blocks(
        problem,
        nonlinearity,
        &WeightedPoints::sample(pd, options.n_mc, derive_seed(options.seed, &[0])),
    )?;
    let mut diverged = match options.divergence_n_mc {
        Some(n) => divergence_check(problem, pd, nonlinearity, n, derive_seed(options.seed, &[1]))?,
        None => DivergenceFlags::default(),
    };
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    diverged.i |= !finite(&bb.i);
    diverged.a_gamma |= !finite(&bb.a_gamma);
    diverged.a |= !finite(&bb.a);
    diverged.b |= !finite(&bb.b);

    let condition_number = symmetric_inverse(&bb.i, "I").ok().map(|(_, c)| c);
    let sigma = if diverged.diverged() {
        None
    } else {
        bb.sigma(options.gamma).ok()
    };
    let trace_sigma = sigma.as_ref().map(|s| s.trace()).filter(|t| t.is_finite());
    let predicted = trace_sigma
        .map(|t| {
            options
                .n_d
                .iter()
                .map(|&n_d| MsePoint {
                    n_d,
                    mse: t / n_d as f64,
                })
                .collect()
        })
        .unwrap_or_default();
    let gamma_hat = if diverged.diverged() {
        None
    } else {
        bb.optimal_gamma().ok()
    };
    Ok(AsymptoticReport {
        kind: nonlinearity.name(),
        score_mode: problem.score,
        gamma: options.gamma,
        i_hat: rows(&bb.i),
        a_gamma_hat: rows(&bb.a_gamma),
        a_hat: rows(&bb.a),
        b_hat: rows(&bb.b),
        sigma_hat: sigma.as_ref().and_then(rows),
        condition_number,
        trace_sigma,
        predicted_mse: predicted,
        gamma_hat,
        diverged,
        mc_samples: options.n_mc,
        seed: options.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::NonlinearityKind::{self, *};
    use crate::models::GaussPrecisionModel;
    use crate::noise::AuxiliarySpec;

    fn gauss(var: f64) -> Arc<AuxiliarySpec> {
        Arc::new(AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::from_element(1, 1, var)).unwrap())
    }

    fn gauss_problem(lambda: f64, aux_var: f64, score: ScoreMode) -> TheoryProblem {
        TheoryProblem::new(
            Arc::new(GaussPrecisionModel),
            GaussPrecisionModel::theta_star(lambda),
            gauss(aux_var),
            score,
        )
        .unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn predicted_mse_examples() {
        assert!((predicted_mse(&DMatrix::identity(17, 17), 1000) - 0.017).abs() < 1e-15);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(predicted_mse(&s, 10), 2.0 * predicted_mse(&s, 20));
    }

    #[test]
    fn sigma_rejects_singular_information() {
        let z = DMatrix::<f64>::zeros(2, 2);
        let i = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(sigma_g(&i, &z, &z, &z, 1.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn sigma_flags_non_finite() {
        let id = DMatrix::<f64>::identity(2, 2);
        let mut inf = id.clone();
        inf[(0, 0)] = f64::INFINITY;
        assert!(matches!(sigma_g(&id, &inf, &id, &id, 1.0), Err(Error::Diverged(_))));
    }

    #[test]
    fn fisher_information_gaussian() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        let f = fisher_information(&prob, &pd, 1_000_000, 3).unwrap();
        assert!((f[(0, 0)] - 0.5).abs() < 0.01);

        let pd4 = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::from_element(1, 1, 0.25)).unwrap();
        let prob4 = gauss_problem(4.0, 0.25, ScoreMode::Augmented);
        let f4 = fisher_information(&prob4, &pd4, 1_000_000, 4).unwrap();
        assert!((f4[(0, 0)] - 1.0 / 32.0).abs() < 0.02 / 32.0);
    }

    #[test]
    fn fisher_score_has_zero_mean() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::FisherOnly);
        let n = 200_000;
        let bb = building_blocks(&prob, &Is, &WeightedPoints::sample(&pd, n, 9)).unwrap();
        let se = (bb.i[(0, 0)] / n as f64).sqrt();
        assert!(bb.v[0].abs() < 3.0 * se);
    }

    #[test]
    fn matched_noise_identities() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        let pts = WeightedPoints::sample(&pd, 10_000, 5);
        let is = building_blocks(&prob, &Is, &pts).unwrap();
        let nc = building_blocks(&prob, &Nc, &pts).unwrap();
        // ℓ is zero only up to rounding in the Gaussian log densities
        assert!(rel(&nc.i, &(&is.i * 0.5)) < 1e-12);
        assert!(rel(&nc.a_gamma, &nc.a) < 1e-12);
        assert!(rel(&is.a, &is.i) < 1e-12);
        assert!(rel(&is.b, &(&is.v * is.v.transpose())) < 1e-15);
    }

    #[test]
    fn inverse_is_information_is_noise_second_moment() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let pn = gauss(0.7);
        let prob = gauss_problem(1.0, 0.7, ScoreMode::Augmented);
        let i = estimate_i(&prob, &pd, &InvIs, 1_000_000, 1).unwrap();
        // ∫ p_n ψψᵀ with ψ = (−x²/2, 1) and x ~ N(0, 0.7)
        let direct = building_blocks(&prob, &Is, &WeightedPoints::sample(pn.as_ref(), 1_000_000, 2)).unwrap().a;
        assert!(rel(&i, &direct) < 0.02, "{i} vs {direct}");
        let exact = DMatrix::from_row_slice(2, 2, &[3.0 * 0.49 / 4.0, -0.35, -0.35, 1.0]);
        assert!(rel(&i, &exact) < 0.02);
    }

    #[test]
    fn monte_carlo_matches_quadrature() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        // wider p_n keeps the direct-ratio kinds finite, narrower the inverse ones
        let pts = WeightedPoints::sample(&pd, 1_000_000, 11);
        for (aux_var, kinds) in [(2.0, [Nc, Is, Po]), (0.8, [Nc, InvIs, InvPo])] {
            let prob = gauss_problem(1.0, aux_var, ScoreMode::Augmented);
            let quad = WeightedPoints::quadrature_1d(|x| prob.log_pd(&[x]), -40.0, 40.0, 20_000);
            for kind in kinds {
                let mc = building_blocks(&prob, &kind, &pts).unwrap();
                let q = building_blocks(&prob, &kind, &quad).unwrap();
                for (m, o) in [(&mc.i, &q.i), (&mc.a_gamma, &q.a_gamma), (&mc.a, &q.a), (&mc.b, &q.b)] {
                    assert!(rel(m, o) < 0.01, "{kind}: {m} vs {o}");
                }
            }
        }
    }

    #[test]
    fn matched_noise_traces_agree() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::FisherOnly);
        let inv_fisher = 1.0 / GaussPrecisionModel::fisher_information(1.0);
        let pts = WeightedPoints::sample(&pd, 200_000, 8);
        for kind in NonlinearityKind::ALL {
            let bb = building_blocks(&prob, &kind, &pts).unwrap();
            for gamma in [0.25, 1.0, 4.0] {
                let s = bb.sigma(gamma).unwrap();
                let want = (1.0 + gamma) * inv_fisher;
                assert!((s[(0, 0)] - want).abs() / want < 0.05, "{kind} γ={gamma}: {}", s[(0, 0)]);
            }
        }
    }

    #[test]
    fn matched_noise_gives_unit_gamma() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        let bb = building_blocks(&prob, &Nc, &WeightedPoints::sample(&pd, 10_000, 1)).unwrap();
        // the Gaussian log densities agree to rounding, so the traces do too
        assert!((bb.optimal_gamma().unwrap() - 1.0).abs() < 1e-10);
        let same = BuildingBlocks {
            a_gamma: bb.a.clone(),
            ..bb.clone()
        };
        assert_eq!(same.optimal_gamma().unwrap(), 1.0);
    }

    #[test]
    fn closed_form_gamma_matches_grid() {
        let prob = gauss_problem(1.0, 1.5, ScoreMode::Augmented);
        let quad = WeightedPoints::quadrature_1d(|x| prob.log_pd(&[x]), -40.0, 40.0, 20_000);
        for kind in [Nc, InvIs] {
            let bb = building_blocks(&prob, &kind, &quad).unwrap();
            let g = bb.optimal_gamma().unwrap();
            let grid: Vec<f64> = (0..=32).map(|k| 2f64.powf((k as f64 - 16.0) / 4.0)).collect();
            let best = grid
                .iter()
                .copied()
                .min_by(|a, b| {
                    let fa = gamma_objective(&bb.i, &bb.a_gamma, &bb.a, &bb.b, *a).unwrap();
                    let fb = gamma_objective(&bb.i, &bb.a_gamma, &bb.a, &bb.b, *b).unwrap();
                    fa.total_cmp(&fb)
                })
                .unwrap();
            assert!((g.log2() - best.log2()).abs() <= 0.25 + 1e-12, "{kind}: {g} vs {best}");
            let f = |x: f64| gamma_objective(&bb.i, &bb.a_gamma, &bb.a, &bb.b, x).unwrap();
            assert!(f(g) <= f(g * 1.01) && f(g) <= f(g / 1.01));
        }
    }

    #[test]
    fn importance_sampling_small_gamma_limit() {
        // p_n wider than p_d keeps 𝒜_γ finite
        let prob = gauss_problem(1.0, 2.0, ScoreMode::Augmented);
        let quad = WeightedPoints::quadrature_1d(|x| prob.log_pd(&[x]), -40.0, 40.0, 20_000);
        let bb = building_blocks(&prob, &Is, &quad).unwrap();
        let (inv, _) = symmetric_inverse(&bb.i, "I").unwrap();
        let mle = (&inv * (&bb.i - &bb.b) * &inv).trace();
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let gamma = 2f64.powi(-k);
            let t = bb.sigma(gamma).unwrap().trace();
            assert!(t < prev && t >= mle - 1e-12);
            prev = t;
        }
        assert!((prev - mle) / mle < 1e-2);
    }

    #[test]
    fn optimal_noise_beats_gaussians() {
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        let quad = WeightedPoints::quadrature_1d(|x| prob.log_pd(&[x]), -40.0, 40.0, 40_000);
        let i = building_blocks(&prob, &Is, &quad).unwrap().i;
        let opt = OptimalNoise::new(&prob, &i).unwrap().normalized_1d(-40.0, 40.0, 40_000).unwrap();
        for x in [0.3, 1.7, 4.0] {
            assert!((opt.log_density(&[x]) - opt.log_density(&[-x])).abs() < 1e-12);
        }
        let trace_with = |aux: Arc<dyn LogDensity>| {
            building_blocks(&prob.with_aux(aux), &Is, &quad)
                .and_then(|bb| bb.sigma(1.0))
                .map(|s| s.trace())
                .unwrap_or(f64::INFINITY)
        };
        let best = trace_with(Arc::new(opt));
        for sigma in [0.5f64, 1.0, 2.0, 4.0] {
            let t = trace_with(gauss(sigma * sigma));
            assert!(best <= t, "σ={sigma}: {best} > {t}");
        }
    }

    #[test]
    fn optimal_noise_scale_invariance() {
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        let i = DMatrix::from_row_slice(2, 2, &[0.75, -0.5, -0.5, 1.0]);
        let a = OptimalNoise::new(&prob, &i).unwrap();
        let b = OptimalNoise::new(&prob, &(&i * 3.0)).unwrap();
        let d0 = a.log_density(&[0.4]) - b.log_density(&[0.4]);
        let d1 = a.log_density(&[2.5]) - b.log_density(&[2.5]);
        assert!((d0 - 3f64.ln()).abs() < 1e-12 && (d1 - d0).abs() < 1e-12);
    }

    #[test]
    fn matched_noise_never_diverges() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 1.0, ScoreMode::Augmented);
        for kind in NonlinearityKind::ALL {
            assert!(!divergence_check(&prob, &pd, &kind, 20_000, 4).unwrap().any(), "{kind}");
        }
    }

    #[test]
    fn heavy_ratio_diverges() {
        // p_n much narrower than p_d makes E_d[q ψψᵀ] infinite for IS
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 0.3, ScoreMode::Augmented);
        assert!(divergence_check(&prob, &pd, &Is, 20_000, 4).unwrap().diverged());
        assert!(!divergence_check(&prob, &pd, &Nc, 20_000, 4).unwrap().diverged());
    }

    #[test]
    fn report_json_round_trip() {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let prob = gauss_problem(1.0, 2.0, ScoreMode::Augmented);
        let opts = ReportOptions {
            gamma: 1.0,
            n_mc: 20_000,
            seed: 3,
            n_d: vec![100, 1000],
            divergence_n_mc: Some(5_000),
        };
        let r = report(&prob, &pd, &Nc, &opts).unwrap();
        let sym = r.i_hat.as_ref().unwrap();
        assert_eq!(sym[0][1], sym[1][0]);
        assert!(r.gamma_hat.unwrap() > 0.0);
        assert_eq!(r.predicted_mse.len(), 2);
        let json = serde_json::to_string(&r).unwrap();
        let back: AsymptoticReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(report(&prob, &pd, &Nc, &opts).unwrap(), r);
    }
}
