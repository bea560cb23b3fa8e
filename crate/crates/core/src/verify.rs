//! Self-checks against analytic oracles, shared by the `verify` command and the
//! acceptance run.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::asymptotics::{building_blocks, ScoreMode, TheoryProblem, WeightedPoints};
use crate::family::{check_pairing, NonlinearityKind};
use crate::models::{GaussPrecisionModel, IcaModel, ParamVector};
use crate::noise::{AuxiliarySpec, GaussianAux, Sampler};
use crate::objective::{nc_logistic_form, objective_gradient, objective_value, EstimationProblem};
use crate::optimizer::finite_diff_gradient;
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &str, body: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (passed, detail) = body();
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `g2'/g1' = q` by central differences on a log-uniform grid over `[1e-6, 1e6]`.
pub fn pairing_identity(n_q: usize) -> Check {
    timed("pairing identity", || {
        let mut failures = Vec::new();
        for kind in NonlinearityKind::ALL {
            for k in 0..n_q {
                let q = 10f64.powf(-6.0 + 12.0 * k as f64 / (n_q - 1) as f64);
                match check_pairing(kind, q, 1e-4 * q, 1e-5) {
                    Ok(true) => {}
                    Ok(false) => failures.push(format!("{kind} q={q:e}")),
                    Err(e) => failures.push(format!("{kind} q={q:e}: {e}")),
                }
            }
        }
        (
            failures.is_empty(),
            if failures.is_empty() {
                format!("{} kinds x {n_q} ratios", NonlinearityKind::ALL.len())
            } else {
                format!("{} failures, first {}", failures.len(), failures[0])
            },
        )
    })
}

/// Analytic gradient vs central differences on random two-dimensional ICA problems.
pub fn gradient_oracle(n_problems: usize, seed: u64) -> Check {
    timed("gradient oracle", || {
        let mut rng = stream(seed);
        let mut worst: f64 = 0.0;
        for trial in 0..n_problems {
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bm = DMatrix::from_row_slice(2, 2, &b) + DMatrix::identity(2, 2) * 1.5;
            let alpha = [1.0, 2.0, 3.0][trial % 3];
            let pd = AuxiliarySpec::gen_gauss(alpha, bm).expect("well-conditioned");
            let pn = AuxiliarySpec::Gaussian(GaussianAux::standard(2));
            let model = Arc::new(IcaModel::new(2, alpha).expect("valid alpha"));
            let phi: Vec<f64> = (0..4)
                .map(|k| if k % 3 == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
                .collect();
            let theta = ParamVector::new(phi, rng.random_range(-2.0..-1.0));
            let data = pd.sample(50, rng.random());
            let noise = pn.sample(50, rng.random());
            for kind in NonlinearityKind::ALL {
                let prob = EstimationProblem::new(model.clone(), kind, data.clone(), noise.clone(), &pn)
                    .expect("valid problem");
                let Ok(g) = objective_gradient(&prob, &theta) else {
                    return (false, format!("{kind} problem {trial}: gradient failed"));
                };
                let f = |t: &DVector<f64>| objective_value(&prob, &ParamVector::from(t)).unwrap_or(f64::NAN);
                let fd = finite_diff_gradient(f, &DVector::from_column_slice(theta.as_slice()), 1e-6);
                let err = (&g.values - &fd).norm() / g.values.norm().max(1e-8);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
        }
        (worst < 1e-5, format!("worst relative error {worst:.2e} over {n_problems} problems"))
    })
}

/// The logistic-regression form of the NC objective equals the generic form.
pub fn nc_identity(n_instances: usize, seed: u64) -> Check {
    timed("NC logistic identity", || {
        let mut rng = stream(seed);
        let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).expect("unit Gaussian");
        let mut worst: f64 = 0.0;
        for _ in 0..n_instances {
            let var: f64 = rng.random_range(0.5..4.0);
            let pn = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::from_element(1, 1, var)).expect("valid");
            let prob = EstimationProblem::new(
                Arc::new(GaussPrecisionModel),
                NonlinearityKind::Nc,
                pd.sample(40, rng.random()),
                pn.sample(40, rng.random()),
                &pn,
            )
            .expect("valid problem");
            let theta = ParamVector::new(vec![rng.random_range(0.2..3.0)], rng.random_range(-3.0..1.0));
            let (Ok(a), Ok(b)) = (objective_value(&prob, &theta), nc_logistic_form(&prob, &theta)) else {
                return (false, "evaluation failed".into());
            };
            worst = worst.max((a - b).abs() / a.abs());
        }
        (worst <= 1e-10, format!("worst relative difference {worst:.2e}"))
    })
}

fn matched_gauss_problem(score: ScoreMode) -> (TheoryProblem, AuxiliarySpec) {
    let pd = AuxiliarySpec::gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).expect("unit Gaussian");
    let problem = TheoryProblem::new(
        Arc::new(GaussPrecisionModel),
        GaussPrecisionModel::theta_star(1.0),
        Arc::new(pd.clone()),
        score,
    )
    .expect("consistent problem");
    (problem, pd)
}

/// With `p_n = p_d` and known normalizer, `Σ(γ) = (1+γ) I_F⁻¹` for every kind.
pub fn matched_noise_known_normalizer(n_mc: usize, seed: u64) -> Check {
    timed("matched noise, known normalizer", || {
        let (problem, pd) = matched_gauss_problem(ScoreMode::FisherOnly);
        let points = WeightedPoints::sample(&pd, n_mc, seed);
        let inv_fisher = 1.0 / GaussPrecisionModel::fisher_information(1.0);
        let mut worst: f64 = 0.0;
        for kind in NonlinearityKind::ALL {
            let Ok(bb) = building_blocks(&problem, &kind, &points) else {
                return (false, format!("{kind}: moment estimation failed"));
            };
            for gamma in [0.25, 1.0, 4.0] {
                let Ok(s) = bb.sigma(gamma) else {
                    return (false, format!("{kind}: covariance failed at γ={gamma}"));
                };
                let want = DMatrix::from_element(1, 1, (1.0 + gamma) * inv_fisher);
                worst = worst.max((s - &want).norm() / want.norm());
            }
        }
        (worst < 0.05, format!("worst relative deviation {worst:.2e} at n_mc={n_mc}"))
    })
}

/// With `p_n = p_d` and estimated normalizer, `tr Σ` does not depend on the kind.
pub fn matched_noise_kind_independence(n_mc: usize, seed: u64) -> Check {
    timed("matched noise, kind independence", || {
        let (problem, pd) = matched_gauss_problem(ScoreMode::Augmented);
        let points = WeightedPoints::sample(&pd, n_mc, seed);
        let mut traces = Vec::new();
        for kind in NonlinearityKind::ALL {
            match building_blocks(&problem, &kind, &points).and_then(|bb| bb.sigma(1.0)) {
                Ok(s) => traces.push(s.trace()),
                Err(e) => return (false, format!("{kind}: {e}")),
            }
        }
        let mut worst: f64 = 0.0;
        for a in &traces {
            for b in &traces {
                worst = worst.max((a - b).abs() / a.min(*b));
            }
        }
        (worst < 0.05, format!("traces {traces:.4?}, worst pairwise {worst:.2e}"))
    })
}

/// The fast suite run by the `verify` command.
pub fn run_verify() -> Vec<Check> {
    vec![
        pairing_identity(1000),
        gradient_oracle(20, 21),
        nc_identity(100, 5),
        matched_noise_known_normalizer(100_000, 7),
        matched_noise_kind_independence(100_000, 8),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        for check in run_verify() {
            assert!(check.passed, "{check}");
        }
    }

    #[test]
    fn display_format() {
        let c = timed("x", || (false, "detail".into()));
        assert!(c.to_string().starts_with("FAIL x: detail"));
    }
}
