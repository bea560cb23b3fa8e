//! The sample objective `J_g(θ)` and its analytic gradient.
//!
//! Every density ratio enters through `ℓ = log p_m⁰(x; φ) + c - log p_n(x)`.
//! `log p_n` is evaluated once per sample at construction since the samples stay
//! fixed while the optimizer moves `θ`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::family::NonlinearityKind;
use crate::models::{ParamVector, UnnormalizedModel};
use crate::noise::LogDensity;
use crate::optimizer::{Evaluation, Objective};
use crate::samples::Samples;
use crate::summation::blocked_reduce;

/// Data and noise samples, their fixed `log p_n` values, the model and the pair.
#[derive(Clone)]
pub struct EstimationProblem {
    model: Arc<dyn UnnormalizedModel>,
    kind: NonlinearityKind,
    data: Samples,
    noise: Samples,
    data_logpn: Vec<f64>,
    noise_logpn: Vec<f64>,
}

impl std::fmt::Debug for EstimationProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstimationProblem")
            .field("kind", &self.kind)
            .field("n_data", &self.data.len())
            .field("n_noise", &self.noise.len())
            .finish()
    }
}

/// Gradient of `J_g` plus whether any weight or term overflowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: DVector<f64>,
    pub diverged: bool,
}

impl EstimationProblem {
    pub fn new(
        model: Arc<dyn UnnormalizedModel>,
        kind: NonlinearityKind,
        data: Samples,
        noise: Samples,
        aux: &dyn LogDensity,
    ) -> Result<Self> {
        let data_logpn = data.rows().map(|x| aux.log_density(x)).collect();
        let noise_logpn = noise.rows().map(|x| aux.log_density(x)).collect();
        Self::from_parts(model, kind, data, noise, data_logpn, noise_logpn)
    }

    pub fn from_parts(
        model: Arc<dyn UnnormalizedModel>,
        kind: NonlinearityKind,
        data: Samples,
        noise: Samples,
        data_logpn: Vec<f64>,
        noise_logpn: Vec<f64>,
    ) -> Result<Self> {
        if data.is_empty() || noise.is_empty() {
            return Err(Error::InvalidInput("need at least one data and one noise sample".into()));
        }
        for s in [&data, &noise] {
            if s.dim() != model.dim_x() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim_x(),
                    got: s.dim(),
                });
            }
        }
        if data_logpn.len() != data.len() || noise_logpn.len() != noise.len() {
            return Err(Error::InvalidInput("log p_n vector length does not match samples".into()));
        }
        if let Some(bad) = data_logpn.iter().chain(&noise_logpn).find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "auxiliary log-density must be finite on every sample (got {bad})"
            )));
        }
        Ok(Self {
            model,
            kind,
            data,
            noise,
            data_logpn,
            noise_logpn,
        })
    }

    pub fn kind(&self) -> NonlinearityKind {
        self.kind
    }

    pub fn with_kind(&self, kind: NonlinearityKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn model(&self) -> &Arc<dyn UnnormalizedModel> {
        &self.model
    }

    pub fn data(&self) -> &Samples {
        &self.data
    }

    pub fn noise(&self) -> &Samples {
        &self.noise
    }

    /// `γ = N_d / N_n`.
    pub fn gamma(&self) -> f64 {
        self.data.len() as f64 / self.noise.len() as f64
    }

    pub fn param_dim(&self) -> usize {
        self.model.dim_phi() + 1
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                got: theta.len(),
            });
        }
        self.model.check_phi(&theta[..theta.len() - 1])
    }

    /// Log-ratios at every data point and every noise point.
    pub fn log_ratios(&self, theta: &ParamVector) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_theta(theta.as_slice())?;
        let (phi, c) = (theta.phi(), theta.c());
        let lr = |s: &Samples, lpn: &[f64]| -> Vec<f64> {
            s.rows()
                .zip(lpn)
                .map(|(x, &lp)| (self.model.log_pm0(phi, x) + c) - lp)
                .collect()
        };
        Ok((lr(&self.data, &self.data_logpn), lr(&self.noise, &self.noise_logpn)))
    }

    /// Weighted sums `Σ g(ℓ)` and `Σ w(ℓ)·ψ` over one sample set.
    fn term_sums(
        &self,
        theta: &[f64],
        samples: &Samples,
        logpn: &[f64],
        data_side: bool,
        with_grad: bool,
    ) -> (f64, Vec<f64>) {
        let p = self.param_dim();
        let phi = &theta[..p - 1];
        let c = theta[p - 1];
        let kind = self.kind;
        let model = &*self.model;
        blocked_reduce(
            samples.len(),
            |start, end| {
                let mut val = 0.0;
                let mut grad = vec![0.0; if with_grad { p } else { 0 }];
                let mut psi = vec![0.0; p - 1];
                for i in start..end {
                    let x = samples.row(i);
                    let lp0 = if with_grad {
                        model.log_pm0_and_score(phi, x, &mut psi)
                    } else {
                        model.log_pm0(phi, x)
                    };
                    let l = (lp0 + c) - logpn[i];
                    let (g1, g2) = kind.g_values_unchecked(l);
                    val += if data_side { g1 } else { g2 };
                    if with_grad {
                        let w = kind.weights_unchecked(l);
                        let w = if data_side { w.w_d } else { w.w_n };
                        for (g, s) in grad.iter_mut().zip(&psi) {
                            *g += w * s;
                        }
                        grad[p - 1] += w;
                    }
                }
                (val, grad)
            },
            |(va, mut ga), (vb, gb)| {
                for (a, b) in ga.iter_mut().zip(&gb) {
                    *a += b;
                }
                (va + vb, ga)
            },
        )
        .unwrap_or((0.0, vec![0.0; if with_grad { p } else { 0 }]))
    }

    fn eval_raw(&self, theta: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let nd = self.data.len() as f64;
        let nn = self.noise.len() as f64;
        let (vd, gd) = self.term_sums(theta, &self.data, &self.data_logpn, true, with_grad);
        let (vn, gn) = self.term_sums(theta, &self.noise, &self.noise_logpn, false, with_grad);
        let value = vd / nd - vn / nn;
        let grad = gd.iter().zip(&gn).map(|(a, b)| a / nd - b / nn).collect();
        (value, grad)
    }
}

/// `J_g(θ)`. Overflow shows up as a non-finite value rather than an error.
pub fn objective_value(problem: &EstimationProblem, theta: &ParamVector) -> Result<f64> {
    problem.check_theta(theta.as_slice())?;
    Ok(problem.eval_raw(theta.as_slice(), false).0)
}

/// `∇θ J_g(θ) = mean_d[w_d ψ] - mean_n[w_n ψ]`, flagged when not finite.
pub fn objective_gradient(problem: &EstimationProblem, theta: &ParamVector) -> Result<Gradient> {
    problem.check_theta(theta.as_slice())?;
    let (_, g) = problem.eval_raw(theta.as_slice(), true);
    let diverged = g.iter().any(|v| !v.is_finite());
    Ok(Gradient {
        values: DVector::from_vec(g),
        diverged,
    })
}

#[inline]
fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// The NC objective written as the log-likelihood of a logistic classifier that
/// labels data 1 and noise 0 with logit `ℓ`.
pub fn nc_logistic_form(problem: &EstimationProblem, theta: &ParamVector) -> Result<f64> {
    if problem.kind != NonlinearityKind::Nc {
        return Err(Error::Misuse(format!(
            "logistic form only applies to the nc pair, problem uses {}",
            problem.kind
        )));
    }
    let (ld, ln) = problem.log_ratios(theta)?;
    let data: Vec<f64> = ld.iter().map(|&l| log_sigmoid(l)).collect();
    let noise: Vec<f64> = ln.iter().map(|&l| log_sigmoid(-l)).collect();
    Ok(crate::summation::pairwise_sum(&data) / ld.len() as f64
        + crate::summation::pairwise_sum(&noise) / ln.len() as f64)
}

impl Objective for EstimationProblem {
    fn dim(&self) -> usize {
        self.param_dim()
    }

    fn evaluate(&self, theta: &DVector<f64>) -> Evaluation {
        if self.check_theta(theta.as_slice()).is_err() {
            return Evaluation::diverged(theta.len());
        }
        let (value, grad) = self.eval_raw(theta.as_slice(), true);
        let diverged = !value.is_finite() || grad.iter().any(|v| !v.is_finite());
        Evaluation {
            value,
            gradient: DVector::from_vec(grad),
            diverged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GaussPrecisionModel, IcaModel};
    use crate::noise::{AuxiliarySpec, GaussianAux, Sampler};
    use crate::optimizer::finite_diff_gradient;
    use nalgebra::DMatrix;
    use rand::Rng;
    use NonlinearityKind::*;

    fn gauss_problem(kind: NonlinearityKind, n: usize, aux_var: f64, seed: u64) -> EstimationProblem {
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let pn = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::from_element(1, 1, aux_var)).unwrap();
        EstimationProblem::new(
            Arc::new(GaussPrecisionModel),
            kind,
            pd.sample(n, seed),
            pn.sample(n, seed + 1),
            &pn,
        )
        .unwrap()
    }

    /// Problem where the model at θ equals p_n exactly, so ℓ ≡ 0.
    fn matched_problem(kind: NonlinearityKind) -> (EstimationProblem, ParamVector) {
        let b = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.9]);
        let aux = AuxiliarySpec::gen_gauss(1.0, b.clone()).unwrap();
        let AuxiliarySpec::GenGauss(p) = &aux else { unreachable!() };
        let theta = ParamVector::new(p.b_row_major().to_vec(), p.c_star());
        let data = aux.sample(300, 1);
        let prob = EstimationProblem::new(Arc::new(IcaModel::new(2, 1.0).unwrap()), kind, data.clone(), data, &aux)
            .unwrap();
        (prob, theta)
    }

    #[test]
    fn matched_values() {
        let expect = [(Is, -1.0), (Nc, -2.0 * std::f64::consts::LN_2), (InvIs, -1.0)];
        for (kind, v) in expect {
            let (prob, theta) = matched_problem(kind);
            let (ld, ln) = prob.log_ratios(&theta).unwrap();
            assert!(ld.iter().chain(&ln).all(|&l| l == 0.0));
            let got = objective_value(&prob, &theta).unwrap();
            assert!((got - v).abs() < 1e-14, "{kind}: {got}");
        }
    }

    #[test]
    fn nc_symmetric_cancellation() {
        let (prob, theta) = matched_problem(Nc);
        let g = objective_gradient(&prob, &theta).unwrap();
        assert!(!g.diverged);
        assert!(g.values.iter().all(|&v| v == 0.0), "{:?}", g.values);
    }

    #[test]
    fn is_c_component_vanishes() {
        let (prob, theta) = matched_problem(Is);
        let g = objective_gradient(&prob, &theta).unwrap();
        assert_eq!(g.values[4], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let prob = gauss_problem(Nc, 10, 2.0, 1);
        let bad = ParamVector::new(vec![1.0, 2.0], 0.0);
        assert!(matches!(objective_value(&prob, &bad), Err(Error::DimensionMismatch { .. })));
        assert!(objective_gradient(&prob, &bad).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(21);
        for trial in 0..20 {
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bm = DMatrix::from_row_slice(2, 2, &b) + DMatrix::identity(2, 2) * 1.5;
            let alpha = [1.0, 2.0, 3.0][trial % 3];
            let truth = AuxiliarySpec::gen_gauss(alpha, bm).unwrap();
            let pn = AuxiliarySpec::Gaussian(GaussianAux::standard(2));
            let model = Arc::new(IcaModel::new(2, alpha).unwrap());
            let theta0: Vec<f64> = (0..4)
                .map(|k| if k % 3 == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
                .collect();
            let theta = ParamVector::new(theta0, rng.random_range(-2.0..-1.0));
            for kind in NonlinearityKind::ALL {
                let prob = EstimationProblem::new(
                    model.clone(),
                    kind,
                    truth.sample(50, 100 + trial as u64),
                    pn.sample(50, 200 + trial as u64),
                    &pn,
                )
                .unwrap();
                let g = objective_gradient(&prob, &theta).unwrap();
                assert!(!g.diverged);
                let f = |t: &DVector<f64>| objective_value(&prob, &ParamVector::from(t)).unwrap();
                let fd = finite_diff_gradient(f, &DVector::from_vec(theta.as_slice().to_vec()), 1e-6);
                let err = (&g.values - &fd).norm() / g.values.norm().max(1e-8);
                assert!(err < 1e-5, "{kind} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn nc_logistic_identity() {
        let mut rng = crate::rng::stream(5);
        for i in 0..100 {
            let prob = gauss_problem(Nc, 40, rng.random_range(0.5..4.0), i);
            let theta = ParamVector::new(vec![rng.random_range(0.2..3.0)], rng.random_range(-3.0..1.0));
            let a = objective_value(&prob, &theta).unwrap();
            let b = nc_logistic_form(&prob, &theta).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");
        }
        let (prob, theta) = matched_problem(Nc);
        let v = nc_logistic_form(&prob, &theta).unwrap();
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
        let wrong = gauss_problem(Is, 10, 1.0, 0);
        assert!(matches!(nc_logistic_form(&wrong, &GaussPrecisionModel::theta_star(1.0)), Err(Error::Misuse(_))));
    }

    #[test]
    fn nc_single_saturated_data_point() {
        let pn = AuxiliarySpec::Gaussian(GaussianAux::standard(1));
        let data = Samples::from_rows(&[[0.0]]).unwrap();
        let noise = Samples::from_rows(&[[10.0]]).unwrap();
        let prob = EstimationProblem::new(Arc::new(GaussPrecisionModel), Nc, data, noise, &pn).unwrap();
        let theta = ParamVector::new(vec![10.0], 40.0);
        let (ld, ln) = prob.log_ratios(&theta).unwrap();
        assert!(ld[0] > 40.0 && ln[0] < -400.0);
        let v = nc_logistic_form(&prob, &theta).unwrap();
        assert!(v < 0.0 && v > -1e-15, "{v}");
    }

    #[test]
    fn overflow_flags_divergence() {
        let prob = gauss_problem(Po, 20, 1.0, 3);
        let theta = ParamVector::new(vec![1.0], 500.0);
        let g = objective_gradient(&prob, &theta).unwrap();
        assert!(g.diverged);
        let v = objective_value(&prob, &theta).unwrap();
        assert!(!v.is_finite());
        let e = prob.evaluate(&DVector::from_vec(vec![1.0, 500.0]));
        assert!(e.diverged);
    }

    #[test]
    fn domain_violation_reported_as_divergence() {
        let prob = gauss_problem(Nc, 20, 1.0, 3);
        let e = prob.evaluate(&DVector::from_vec(vec![-1.0, 0.0]));
        assert!(e.diverged);
        assert!(objective_value(&prob, &ParamVector::new(vec![-1.0], 0.0)).is_err());
    }

    #[test]
    fn nc_shift_invariance() {
        let prob = gauss_problem(Nc, 200, 2.0, 8);
        let theta = ParamVector::new(vec![1.3], -0.7);
        let base = objective_value(&prob, &theta).unwrap();
        let k = 3.7;
        let shifted = EstimationProblem::from_parts(
            prob.model.clone(),
            Nc,
            prob.data.clone(),
            prob.noise.clone(),
            prob.data_logpn.iter().map(|v| v + k).collect(),
            prob.noise_logpn.iter().map(|v| v + k).collect(),
        )
        .unwrap();
        let v = objective_value(&shifted, &ParamVector::new(vec![1.3], -0.7 + k)).unwrap();
        assert!((v - base).abs() <= 1e-10 * base.abs());
    }

    fn gradient_standard_errors(prob: &EstimationProblem, theta: &ParamVector) -> Vec<f64> {
        let p = prob.param_dim();
        let mut se2 = vec![0.0; p];
        for (samples, logpn, data_side) in [
            (&prob.data, &prob.data_logpn, true),
            (&prob.noise, &prob.noise_logpn, false),
        ] {
            let n = samples.len() as f64;
            let mut m1 = vec![0.0; p];
            let mut m2 = vec![0.0; p];
            let mut psi = vec![0.0; p];
            for (x, lp) in samples.rows().zip(logpn) {
                let lp0 = prob.model.log_pm0_and_score(theta.phi(), x, &mut psi[..p - 1]);
                psi[p - 1] = 1.0;
                let w = prob.kind.weights_unchecked(lp0 + theta.c() - lp);
                let w = if data_side { w.w_d } else { w.w_n };
                for k in 0..p {
                    m1[k] += w * psi[k];
                    m2[k] += (w * psi[k]).powi(2);
                }
            }
            for k in 0..p {
                let mean = m1[k] / n;
                se2[k] += (m2[k] / n - mean * mean) / n;
            }
        }
        se2
    }

    #[test]
    fn stationary_at_truth() {
        let theta = GaussPrecisionModel::theta_star(1.0);
        // InvIS needs p_n narrower than p_d for the data weights to stay bounded
        for (kind, aux_var) in [(Nc, 4.0), (InvIs, 0.5)] {
            let prob = gauss_problem(kind, 100_000, aux_var, 31);
            let g = objective_gradient(&prob, &theta).unwrap();
            let se2 = gradient_standard_errors(&prob, &theta);
            let bound = 3.0 * se2.iter().sum::<f64>().sqrt();
            assert!(g.values.norm() < bound, "{kind}: |g| = {} bound {bound}", g.values.norm());
        }
    }

    #[test]
    fn truth_beats_perturbations() {
        let theta = GaussPrecisionModel::theta_star(1.0);
        let mut rng = crate::rng::stream(77);
        let mut wins = 0;
        for rep in 0..50 {
            let prob = gauss_problem(Nc, 100_000, 4.0, 1000 + 2 * rep);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let moved = ParamVector::new(vec![1.0 + 0.3 * ang.cos()], theta.c() + 0.3 * ang.sin());
            if objective_value(&prob, &theta).unwrap() > objective_value(&prob, &moved).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 48, "{wins}/50");
    }
}
