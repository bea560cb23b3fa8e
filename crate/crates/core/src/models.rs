//! Unnormalized models with analytic scores.
//!
//! A model supplies `log p_m⁰(x; φ)` and its gradient in `φ`. The estimators
//! work with the augmented model `log p_m(x; θ) = log p_m⁰(x; φ) + c`, whose
//! score `ψ = (∂φ log p_m⁰, 1)` always ends in a constant 1.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::gamma;

/// Flattened parameters `φ` followed by the negative log-partition parameter `c`.
///
/// For the ICA model `φ` is the unmixing matrix `B` in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(mut phi: Vec<f64>, c: f64) -> Self {
        phi.push(c);
        Self(phi)
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("parameter vector needs at least the c slot".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn phi(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn c(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl From<ParamVector> for nalgebra::DVector<f64> {
    fn from(p: ParamVector) -> Self {
        nalgebra::DVector::from_vec(p.0)
    }
}

impl From<&nalgebra::DVector<f64>> for ParamVector {
    fn from(v: &nalgebra::DVector<f64>) -> Self {
        Self(v.as_slice().to_vec())
    }
}

/// An unnormalized log-density family with an analytic `φ`-gradient.
pub trait UnnormalizedModel: Send + Sync {
    fn dim_x(&self) -> usize;

    fn dim_phi(&self) -> usize;

    /// Rejects parameter values outside the model's domain.
    fn check_phi(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim_phi() {
            return Err(Error::DimensionMismatch {
                expected: self.dim_phi(),
                got: phi.len(),
            });
        }
        Ok(())
    }

    fn log_pm0(&self, phi: &[f64], x: &[f64]) -> f64;

    /// Writes `∂φ log p_m⁰(x; φ)` into `out` (length `dim_phi`).
    fn score_phi(&self, phi: &[f64], x: &[f64], out: &mut [f64]);

    /// Log-density and score in one pass.
    fn log_pm0_and_score(&self, phi: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        self.score_phi(phi, x, out);
        self.log_pm0(phi, x)
    }

    /// The normalizing value of `c`, `-log ∫ p_m⁰(·; φ)`, when known in closed form.
    fn true_c(&self, _phi: &[f64]) -> Option<Result<f64>> {
        None
    }

    /// Gradient of [`UnnormalizedModel::true_c`] in `φ`. Adding it to the score
    /// gives the Fisher score of the normalized model.
    fn true_c_gradient(&self, _phi: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// Writes `ψ(θ, x) = (score_phi, 1)` into `out` (length `dim_phi + 1`).
pub fn augmented_score<M: UnnormalizedModel + ?Sized>(
    model: &M,
    theta: &ParamVector,
    x: &[f64],
    out: &mut [f64],
) {
    let p = model.dim_phi();
    model.score_phi(theta.phi(), x, &mut out[..p]);
    out[p] = 1.0;
}

/// `κ(α) = (2/α)Γ(1/α)` and `ν(α) = sqrt(Γ(1/α)/Γ(3/α))`.
pub fn gg_constants(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("shape alpha must be positive, got {alpha}")));
    }
    let g1 = gamma(1.0 / alpha);
    let g3 = gamma(3.0 / alpha);
    Ok((2.0 / alpha * g1, (g1 / g3).sqrt()))
}

/// `Σ_i |(Bx)_i / ν|^α` with `B` row-major `d × d`.
#[inline]
pub(crate) fn gg_energy(b: &[f64], alpha: f64, nu: f64, x: &[f64]) -> f64 {
    let d = x.len();
    let mut e = 0.0;
    for i in 0..d {
        let row = &b[i * d..(i + 1) * d];
        let y: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        let u = (y / nu).abs();
        e += if alpha == 1.0 {
            u
        } else if alpha == 2.0 {
            u * u
        } else {
            u.powf(alpha)
        };
    }
    e
}

/// Generalized-Gaussian ICA model `log p_m⁰(x; B) = -Σ_i |(Bx)_i / ν(α)|^α`.
#[derive(Clone, Debug, PartialEq)]
pub struct IcaModel {
    dim: usize,
    alpha: f64,
    kappa: f64,
    nu: f64,
}

impl IcaModel {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("ICA dimension must be at least 1".into()));
        }
        let (kappa, nu) = gg_constants(alpha)?;
        Ok(Self {
            dim,
            alpha,
            kappa,
            nu,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn scores_into(&self, b: &[f64], x: &[f64], out: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let (alpha, nu) = (self.alpha, self.nu);
        let mut energy = 0.0;
        let mut out = out;
        for i in 0..d {
            let row = &b[i * d..(i + 1) * d];
            let y: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            let u = y / nu;
            let au = u.abs();
            energy += if alpha == 1.0 {
                au
            } else if alpha == 2.0 {
                au * au
            } else {
                au.powf(alpha)
            };
            if let Some(out) = out.as_deref_mut() {
                // ∂/∂y of -|y/ν|^α; the zero subgradient is used at y = 0
                let dy = if y == 0.0 {
                    0.0
                } else if alpha == 1.0 {
                    -u.signum() / nu
                } else if alpha == 2.0 {
                    -2.0 * u / nu
                } else {
                    -alpha * u.signum() * au.powf(alpha - 1.0) / nu
                };
                for (o, &xj) in out[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *o = dy * xj;
                }
            }
        }
        -energy
    }
}

impl UnnormalizedModel for IcaModel {
    fn dim_x(&self) -> usize {
        self.dim
    }

    fn dim_phi(&self) -> usize {
        self.dim * self.dim
    }

    #[inline]
    fn log_pm0(&self, phi: &[f64], x: &[f64]) -> f64 {
        -gg_energy(phi, self.alpha, self.nu, x)
    }

    fn score_phi(&self, phi: &[f64], x: &[f64], out: &mut [f64]) {
        self.scores_into(phi, x, Some(out));
    }

    #[inline]
    fn log_pm0_and_score(&self, phi: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        self.scores_into(phi, x, Some(out))
    }

    fn true_c(&self, phi: &[f64]) -> Option<Result<f64>> {
        let b = DMatrix::from_row_slice(self.dim, self.dim, phi);
        Some(ica_true_c(&b, self.alpha))
    }

    fn true_c_gradient(&self, phi: &[f64]) -> Option<Result<Vec<f64>>> {
        let b = DMatrix::from_row_slice(self.dim, self.dim, phi);
        // ∂ log|det B| / ∂B = B⁻ᵀ
        Some(match b.try_inverse() {
            Some(inv) => {
                let inv_t = inv.transpose();
                Ok((0..self.dim)
                    .flat_map(|i| (0..self.dim).map(move |j| (i, j)))
                    .map(|(i, j)| inv_t[(i, j)])
                    .collect())
            }
            None => Err(Error::Singular {
                what: "unmixing matrix",
                cond: f64::INFINITY,
            }),
        })
    }
}

fn check_square(b: &DMatrix<f64>, x_len: Option<usize>) -> Result<()> {
    if b.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            got: b.ncols(),
        });
    }
    if let Some(n) = x_len {
        if n != b.ncols() {
            return Err(Error::DimensionMismatch {
                expected: b.ncols(),
                got: n,
            });
        }
    }
    Ok(())
}

fn row_major(b: &DMatrix<f64>) -> Vec<f64> {
    b.transpose().as_slice().to_vec()
}

/// `-Σ_i |(Bx)_i / ν(α)|^α`; the `c` term is added by the caller.
pub fn ica_log_pm0(b: &DMatrix<f64>, alpha: f64, x: &[f64]) -> Result<f64> {
    check_square(b, Some(x.len()))?;
    let model = IcaModel::new(b.nrows(), alpha)?;
    Ok(model.log_pm0(&row_major(b), x))
}

/// Gradient of [`ica_log_pm0`] in `B`.
pub fn ica_score(b: &DMatrix<f64>, alpha: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    check_square(b, Some(x.len()))?;
    let d = b.nrows();
    let model = IcaModel::new(d, alpha)?;
    let mut out = vec![0.0; d * d];
    model.score_phi(&row_major(b), x, &mut out);
    Ok(DMatrix::from_row_slice(d, d, &out))
}

/// `log|det B| - d·log(κ(α)ν(α))`, the value of `c` that normalizes the model.
pub fn ica_true_c(b: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    check_square(b, None)?;
    let (kappa, nu) = gg_constants(alpha)?;
    let det = b.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular {
            what: "unmixing matrix",
            cond: f64::INFINITY,
        });
    }
    Ok(det.abs().ln() - b.nrows() as f64 * (kappa * nu).ln())
}

/// One-dimensional Gaussian precision model `log p_m⁰(x; λ) = -λx²/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussPrecisionModel;

impl GaussPrecisionModel {
    pub fn true_c_at(lambda: f64) -> f64 {
        0.5 * (lambda / (2.0 * PI)).ln()
    }

    /// Fisher information for `λ`, `1/(2λ²)`.
    pub fn fisher_information(lambda: f64) -> f64 {
        0.5 / (lambda * lambda)
    }

    pub fn theta_star(lambda: f64) -> ParamVector {
        ParamVector::new(vec![lambda], Self::true_c_at(lambda))
    }
}

impl UnnormalizedModel for GaussPrecisionModel {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_phi(&self) -> usize {
        1
    }

    fn check_phi(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: phi.len(),
            });
        }
        if !(phi[0] > 0.0) {
            return Err(Error::Domain(format!("precision must be positive, got {}", phi[0])));
        }
        Ok(())
    }

    #[inline]
    fn log_pm0(&self, phi: &[f64], x: &[f64]) -> f64 {
        -0.5 * phi[0] * x[0] * x[0]
    }

    #[inline]
    fn score_phi(&self, _phi: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = -0.5 * x[0] * x[0];
    }

    fn true_c(&self, phi: &[f64]) -> Option<Result<f64>> {
        Some(self.check_phi(phi).map(|_| Self::true_c_at(phi[0])))
    }

    fn true_c_gradient(&self, phi: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(self.check_phi(phi).map(|_| vec![0.5 / phi[0]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;
    use approx::assert_relative_eq;
    use rand::Rng;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn gg_constants_examples() {
        let (k, n) = gg_constants(2.0).unwrap();
        assert_relative_eq!(k, PI.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(n, SQRT2, max_relative = 1e-12);
        let (k, n) = gg_constants(1.0).unwrap();
        assert_relative_eq!(k, 2.0, max_relative = 1e-12);
        assert_relative_eq!(n, 1.0 / SQRT2, max_relative = 1e-12);
        let (k, _) = gg_constants(3.0).unwrap();
        assert_relative_eq!(k, 2.0 / 3.0 * 2.678_938_534_707_747_6, max_relative = 1e-12);
        assert!(gg_constants(0.0).is_err());
        assert!(gg_constants(-1.0).is_err());
    }

    #[test]
    fn log_pm0_examples() {
        let i1 = DMatrix::identity(1, 1);
        assert_relative_eq!(ica_log_pm0(&i1, 2.0, &[1.0]).unwrap(), -0.5, max_relative = 1e-14);
        let b = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 2.0, 0.7]);
        assert_eq!(ica_log_pm0(&b, 1.5, &[0.0, 0.0]).unwrap(), 0.0);
        let i2 = DMatrix::identity(2, 2);
        assert_relative_eq!(
            ica_log_pm0(&i2, 1.0, &[1.0, 1.0]).unwrap(),
            -2.0 * SQRT2,
            max_relative = 1e-12
        );
        assert!(ica_log_pm0(&i2, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn score_examples() {
        let i1 = DMatrix::identity(1, 1);
        assert_relative_eq!(ica_score(&i1, 2.0, &[1.0]).unwrap()[(0, 0)], -1.0, max_relative = 1e-12);
        let b = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 2.0, 0.7]);
        assert!(ica_score(&b, 2.0, &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        let i2 = DMatrix::identity(2, 2);
        let s = ica_score(&i2, 1.0, &[1.0, -1.0]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[-SQRT2, SQRT2, SQRT2, -SQRT2]);
        assert!((s - expect).abs().max() < 1e-12);
    }

    #[test]
    fn zero_subgradient_at_kink() {
        for alpha in [0.5, 1.0] {
            let i2 = DMatrix::identity(2, 2);
            let s = ica_score(&i2, alpha, &[0.0, 2.0]).unwrap();
            assert_eq!(s[(0, 0)], 0.0);
            assert_eq!(s[(0, 1)], 0.0);
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn true_c_examples() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        assert_relative_eq!(ica_true_c(&DMatrix::identity(1, 1), 2.0).unwrap(), -half_log_2pi, max_relative = 1e-12);
        let two = DMatrix::from_element(1, 1, 2.0);
        assert_relative_eq!(ica_true_c(&two, 2.0).unwrap(), 2f64.ln() - half_log_2pi, max_relative = 1e-12);
        assert_relative_eq!(
            ica_true_c(&DMatrix::identity(2, 2), 2.0).unwrap(),
            -(2.0 * PI).ln(),
            max_relative = 1e-12
        );
        assert!(matches!(ica_true_c(&DMatrix::zeros(2, 2), 2.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = crate::rng::stream(11);
        let mut checked = 0;
        while checked < 100 {
            let alpha = [1.0, 2.0, 3.0][checked % 3];
            let d = 1 + checked % 3;
            let model = IcaModel::new(d, alpha).unwrap();
            let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| b[i * d + j] * x[j]).sum())
                .collect();
            if y.iter().any(|v: &f64| v.abs() < 1e-3) {
                continue;
            }
            let mut s = vec![0.0; d * d];
            model.score_phi(&b, &x, &mut s);
            for k in 0..d * d {
                let h = 1e-6;
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[k] += h;
                bm[k] -= h;
                let fd = (model.log_pm0(&bp, &x) - model.log_pm0(&bm, &x)) / (2.0 * h);
                let scale = s[k].abs().max(1e-3);
                assert!((fd - s[k]).abs() / scale < 1e-5, "alpha={alpha} k={k}: {fd} vs {}", s[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn one_dimensional_density_normalizes() {
        for alpha in [1.0, 2.0, 3.0] {
            let b = DMatrix::identity(1, 1);
            let c = ica_true_c(&b, alpha).unwrap();
            let total = quadrature::integrate(
                |x| (ica_log_pm0(&b, alpha, &[x]).unwrap() + c).exp(),
                -30.0,
                30.0,
                200_000,
            );
            assert!((total - 1.0).abs() < 1e-6, "alpha={alpha}: {total}");
        }
    }

    #[test]
    fn alpha_two_is_standard_normal() {
        let mut rng = crate::rng::stream(3);
        for d in [1usize, 2, 4] {
            let b = DMatrix::identity(d, d);
            let c = ica_true_c(&b, 2.0).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = (ica_log_pm0(&b, 2.0, &x).unwrap() + c).exp();
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let expect = (-0.5 * r2).exp() / (2.0 * PI).powf(d as f64 / 2.0);
                assert!((p - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn true_c_gradient_is_inverse_transpose() {
        let model = IcaModel::new(2, 1.0).unwrap();
        let phi = [1.0, 0.5, -0.3, 2.0];
        let g = model.true_c_gradient(&phi).unwrap().unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut p = phi;
            let mut m = phi;
            p[k] += h;
            m[k] -= h;
            let fd = (model.true_c(&p).unwrap().unwrap() - model.true_c(&m).unwrap().unwrap()) / (2.0 * h);
            assert_relative_eq!(fd, g[k], max_relative = 1e-7);
        }
    }

    #[test]
    fn gauss_precision_examples() {
        let m = GaussPrecisionModel;
        assert_relative_eq!(GaussPrecisionModel::true_c_at(1.0), -0.5 * (2.0 * PI).ln(), max_relative = 1e-14);
        assert_eq!(GaussPrecisionModel::fisher_information(1.0), 0.5);
        assert_eq!(GaussPrecisionModel::fisher_information(4.0), 1.0 / 32.0);
        assert!(m.check_phi(&[0.0]).is_err());
        assert!(m.check_phi(&[-1.0]).is_err());
        let mut s = [0.0];
        m.score_phi(&[2.0], &[3.0], &mut s);
        assert_eq!(s[0], -4.5);
        // Var(-x²/2) under N(0, 1) = 1/2
        let var = quadrature::integrate(
            |x| (0.25 * x.powi(4) - 0.25) * (-0.5 * x * x).exp() / (2.0 * PI).sqrt(),
            -20.0,
            20.0,
            20_000,
        );
        assert_relative_eq!(var, 0.5, max_relative = 1e-9);
    }

    #[test]
    fn augmented_score_ends_in_one() {
        let model = IcaModel::new(2, 3.0).unwrap();
        let theta = ParamVector::new(vec![1.0, 0.2, 0.1, 0.9], -1.0);
        let mut out = vec![f64::NAN; 5];
        augmented_score(&model, &theta, &[0.4, -0.8], &mut out);
        assert_eq!(out[4], 1.0);
        let mut out = vec![f64::NAN; 2];
        augmented_score(&GaussPrecisionModel, &GaussPrecisionModel::theta_star(2.0), &[1.0], &mut out);
        assert_eq!(out[1], 1.0);
    }
}
