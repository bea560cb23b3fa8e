//! Auxiliary densities `p_n`: exact log-density evaluation and seeded sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{gg_constants, gg_energy};
use crate::rng;
use crate::samples::Samples;

/// A normalized log-density on `R^dim`.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Anything that can draw a reproducible i.i.d. sample from a seed.
pub trait Sampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, seed: u64) -> Samples;
}

/// Multivariate normal with a cached lower Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAux {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianAux {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 * cov.abs().max().max(1.0) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance)?
            .l();
        let log_det_half: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half;
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        // forward substitution L z = x - m
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
            q += z[i] * z[i];
        }
        self.log_norm - 0.5 * q
    }
}

/// Product of independent generalized Gaussians mapped through `B⁻¹`:
/// `log p(x) = -Σ_i |(Bx)_i / ν(α)|^α + c*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductGenGaussian {
    dim: usize,
    alpha: f64,
    nu: f64,
    b: Vec<f64>,
    b_inv: DMatrix<f64>,
    c_star: f64,
}

impl ProductGenGaussian {
    pub fn new(alpha: f64, b: DMatrix<f64>) -> Result<Self> {
        let c_star = crate::models::ica_true_c(&b, alpha)?;
        let (_, nu) = gg_constants(alpha)?;
        let dim = b.nrows();
        let b_inv = b.clone().try_inverse().ok_or(Error::Singular {
            what: "unmixing matrix",
            cond: f64::INFINITY,
        })?;
        Ok(Self {
            dim,
            alpha,
            nu,
            b: b.transpose().as_slice().to_vec(),
            b_inv,
            c_star,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_star(&self) -> f64 {
        self.c_star
    }

    /// `B` in row-major order.
    pub fn b_row_major(&self) -> &[f64] {
        &self.b
    }

    pub fn b(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.b)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        // Same expression as the ICA model's log p_m⁰ + c, so that the model at
        // the truth and this density agree bit for bit.
        -gg_energy(&self.b, self.alpha, self.nu, x) + self.c_star
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AuxiliarySpec {
    Gaussian(GaussianAux),
    GenGauss(ProductGenGaussian),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum AuxWire {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Gengauss {
        alpha: f64,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
    },
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let flat = Samples::from_rows(rows)?;
    if flat.dim() != n && n > 0 {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: flat.dim(),
        });
    }
    Ok(DMatrix::from_row_slice(n, n, flat.as_slice()))
}

impl Serialize for AuxiliarySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = match self {
            AuxiliarySpec::Gaussian(g) => AuxWire::Gaussian {
                mean: g.mean.as_slice().to_vec(),
                cov: to_rows(&g.cov),
            },
            AuxiliarySpec::GenGauss(p) => AuxWire::Gengauss {
                alpha: p.alpha,
                b: to_rows(&p.b()),
            },
        };
        wire.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AuxiliarySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let spec = match AuxWire::deserialize(d)? {
            AuxWire::Gaussian { mean, cov } => from_rows(&cov)
                .and_then(|cov| GaussianAux::new(DVector::from_vec(mean), cov))
                .map(AuxiliarySpec::Gaussian),
            AuxWire::Gengauss { alpha, b } => from_rows(&b)
                .and_then(|b| ProductGenGaussian::new(alpha, b))
                .map(AuxiliarySpec::GenGauss),
        };
        spec.map_err(D::Error::custom)
    }
}

impl AuxiliarySpec {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        GaussianAux::new(mean, cov).map(AuxiliarySpec::Gaussian)
    }

    pub fn gen_gauss(alpha: f64, b: DMatrix<f64>) -> Result<Self> {
        ProductGenGaussian::new(alpha, b).map(AuxiliarySpec::GenGauss)
    }
}

impl LogDensity for AuxiliarySpec {
    fn dim(&self) -> usize {
        match self {
            AuxiliarySpec::Gaussian(g) => g.mean.len(),
            AuxiliarySpec::GenGauss(p) => p.dim,
        }
    }

    #[inline]
    fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            AuxiliarySpec::Gaussian(g) => g.log_density(x),
            AuxiliarySpec::GenGauss(p) => p.log_density(x),
        }
    }
}

impl Sampler for AuxiliarySpec {
    fn dim(&self) -> usize {
        LogDensity::dim(self)
    }

    fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = rng::stream(seed);
        let d = LogDensity::dim(self);
        let mut out = Samples::zeros(n, d);
        let mut z = vec![0.0; d];
        match self {
            AuxiliarySpec::Gaussian(g) => {
                for i in 0..n {
                    for v in z.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    let row = out.row_mut(i);
                    for (r, row_v) in row.iter_mut().enumerate() {
                        let mut s = g.mean[r];
                        for (c, zc) in z.iter().enumerate().take(r + 1) {
                            s += g.chol[(r, c)] * zc;
                        }
                        *row_v = s;
                    }
                }
            }
            AuxiliarySpec::GenGauss(p) => {
                let draw = GenGaussianDraw::new(p.alpha).expect("alpha validated at construction");
                for i in 0..n {
                    for v in z.iter_mut() {
                        *v = draw.sample(&mut rng);
                    }
                    let row = out.row_mut(i);
                    for (r, row_v) in row.iter_mut().enumerate() {
                        *row_v = (0..d).map(|c| p.b_inv[(r, c)] * z[c]).sum();
                    }
                }
            }
        }
        out
    }
}

/// Sample mean and denominator-`n` covariance Gaussian fitted to `data`.
pub fn fit_gaussian(data: &Samples) -> Result<AuxiliarySpec> {
    fit_gaussian_regularized(data, 0.0)
}

/// As [`fit_gaussian`], adding `ridge · I` to the covariance.
pub fn fit_gaussian_regularized(data: &Samples, ridge: f64) -> Result<AuxiliarySpec> {
    let (n, d) = (data.len(), data.dim());
    if n < d + 1 {
        return Err(Error::InvalidInput(format!(
            "fitting a {d}-dimensional Gaussian needs at least {} samples, got {n}",
            d + 1
        )));
    }
    let mut mean = DVector::zeros(d);
    for row in data.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in data.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= n as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let scale = cov.diagonal().max();
    if !(scale > 0.0) {
        return Err(Error::SingularCovariance);
    }
    // reject numerically rank-deficient covariances before Cholesky sees them
    let eig = cov.clone().symmetric_eigenvalues();
    if eig.min() <= 1e-12 * scale {
        return Err(Error::SingularCovariance);
    }
    AuxiliarySpec::gaussian(mean, cov)
}

pub fn aux_log_density(spec: &AuxiliarySpec, x: &[f64]) -> Result<f64> {
    let d = LogDensity::dim(spec);
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    Ok(spec.log_density(x))
}

pub fn aux_sample(spec: &AuxiliarySpec, n: usize, seed: u64) -> Samples {
    spec.sample(n, seed)
}

/// Draws from the unit-variance generalized Gaussian `∝ exp(-|s/ν(α)|^α)`.
#[derive(Clone, Debug)]
pub struct GenGaussianDraw {
    alpha: f64,
    nu: f64,
    gamma: Gamma<f64>,
}

impl GenGaussianDraw {
    pub fn new(alpha: f64) -> Result<Self> {
        let (_, nu) = gg_constants(alpha)?;
        let gamma = Gamma::new(1.0 / alpha, 1.0)
            .map_err(|e| Error::Domain(format!("gamma shape 1/{alpha}: {e}")))?;
        Ok(Self { alpha, nu, gamma })
    }
}

impl Distribution<f64> for GenGaussianDraw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // |s/ν|^α ~ Gamma(1/α, 1)
        let g: f64 = self.gamma.sample(rng);
        let mag = self.nu * g.powf(1.0 / self.alpha);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    }
}

pub fn gen_gaussian_sample(alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let draw = GenGaussianDraw::new(alpha)?;
    let mut rng = rng::stream(seed);
    Ok((0..n).map(|_| draw.sample(&mut rng)).collect())
}
