//! Density-ratio estimators for unnormalized statistical models.
//!
//! An estimator in this family is fixed by a pair of increasing nonlinearities
//! `(g1, g2)` with `g2'(q) / g1'(q) = q`. Given a data sample and a sample from a
//! known auxiliary density `p_n`, it maximizes
//!
//! ```text
//! J(θ) = mean_i g1(p_m(x_i; θ) / p_n(x_i)) - mean_j g2(p_m(y_j; θ) / p_n(y_j))
//! ```
//!
//! where the model carries its own negative log-partition parameter `c`, so the
//! normalizing constant is estimated like any other parameter.
//!
//! Modules:
//! - [`family`]: the five nonlinearity pairs and their log-domain evaluation.
//! - [`models`]: unnormalized models with analytic scores (ICA, Gaussian precision).
//! - [`noise`]: auxiliary densities with exact log-density and seeded sampling.
//! - [`objective`]: the sample objective and its gradient.
//! - [`optimizer`]: Polak–Ribière⁺ conjugate gradient with a strong-Wolfe line search.
//! - [`asymptotics`]: Monte-Carlo estimates of the asymptotic covariance, MSE and
//!   optimal noise ratio.
//! - [`harness`]: ground truth, trials, sweeps and CSV/JSON persistence.

pub mod asymptotics;
pub mod error;
pub mod family;
pub mod harness;
pub mod models;
pub mod noise;
pub mod objective;
pub mod optimizer;
pub mod quadrature;
pub mod rng;
pub mod samples;
pub mod special;
pub mod summation;
pub mod verify;

pub use error::{Error, Result};
pub use family::{NonlinearityKind, WeightPair};
pub use models::{ParamVector, UnnormalizedModel};
pub use noise::{AuxiliarySpec, LogDensity, Sampler};
pub use objective::EstimationProblem;
pub use samples::Samples;
