//! The five nonlinearity pairs `(g1, g2)` and their log-domain evaluation.
//!
//! Every pair satisfies `g2'(q) / g1'(q) = q`, which makes `p_m = p_d` the unique
//! stationary point of the population objective. All evaluations here take the
//! log-ratio `ℓ = log p_m - log p_n` instead of `q = e^ℓ`, so no density ratio is
//! formed unless the pair itself needs it.
//!
//! | kind    | g1(q)          | g2(q)        | w_d = g1'(q)q | w_n = g2'(q)q |
//! |---------|----------------|--------------|---------------|---------------|
//! | `is`    | log q          | q            | 1             | q             |
//! | `po`    | q              | q²/2         | q             | q²            |
//! | `nc`    | log(q/(1+q))   | log(1+q)     | 1/(1+q)       | q/(1+q)       |
//! | `invpo` | -1/(2q²)       | -1/q         | 1/q²          | 1/q           |
//! | `invis` | -1/q           | log q        | 1/q           | 1             |
//!
//! `invpo` uses `g2 = -1/q`; the positive sign would make `g2` decreasing and
//! break the pairing identity.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearityKind {
    /// Importance sampling.
    Is,
    /// Polynomial.
    Po,
    /// Noise-contrastive (logistic).
    Nc,
    /// Inverse polynomial.
    InvPo,
    /// Inverse importance sampling.
    InvIs,
}

impl NonlinearityKind {
    pub const ALL: [NonlinearityKind; 5] = [
        NonlinearityKind::Is,
        NonlinearityKind::Po,
        NonlinearityKind::Nc,
        NonlinearityKind::InvPo,
        NonlinearityKind::InvIs,
    ];

    pub fn token(self) -> &'static str {
        match self {
            NonlinearityKind::Is => "is",
            NonlinearityKind::Po => "po",
            NonlinearityKind::Nc => "nc",
            NonlinearityKind::InvPo => "invpo",
            NonlinearityKind::InvIs => "invis",
        }
    }
}

impl fmt::Display for NonlinearityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for NonlinearityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NonlinearityKind::ALL
            .into_iter()
            .find(|k| k.token() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown nonlinearity `{s}` (expected one of is, po, nc, invpo, invis)"
                ))
            })
    }
}

/// Gradient weights multiplying the augmented score in the data and noise terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightPair {
    pub w_d: f64,
    pub w_n: f64,
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(l: f64) -> Result<()> {
    if l.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("log-ratio must be finite, got {l}")))
    }
}

impl NonlinearityKind {
    /// `(g1(e^ℓ), g2(e^ℓ))` without validation. Overflow yields ±∞.
    #[inline]
    pub(crate) fn g_values_unchecked(self, l: f64) -> (f64, f64) {
        match self {
            NonlinearityKind::Is => (l, l.exp()),
            NonlinearityKind::Po => (l.exp(), 0.5 * (2.0 * l).exp()),
            NonlinearityKind::Nc => (-softplus(-l), softplus(l)),
            NonlinearityKind::InvPo => (-0.5 * (-2.0 * l).exp(), -(-l).exp()),
            NonlinearityKind::InvIs => (-(-l).exp(), l),
        }
    }

    #[inline]
    pub(crate) fn weights_unchecked(self, l: f64) -> WeightPair {
        let (w_d, w_n) = match self {
            NonlinearityKind::Is => (1.0, l.exp()),
            NonlinearityKind::Po => (l.exp(), (2.0 * l).exp()),
            NonlinearityKind::Nc => (sigmoid(-l), sigmoid(l)),
            NonlinearityKind::InvPo => ((-2.0 * l).exp(), (-l).exp()),
            NonlinearityKind::InvIs => ((-l).exp(), 1.0),
        };
        WeightPair { w_d, w_n }
    }
}

/// `(g1(q), g2(q))` at `q = e^ℓ`, evaluated in the log domain.
pub fn g_values(kind: NonlinearityKind, l: f64) -> Result<(f64, f64)> {
    check_finite(l)?;
    Ok(kind.g_values_unchecked(l))
}

/// `(g1'(q)·q, g2'(q)·q)` at `q = e^ℓ`.
pub fn weights_from_logratio(kind: NonlinearityKind, l: f64) -> Result<WeightPair> {
    check_finite(l)?;
    Ok(kind.weights_unchecked(l))
}

/// Checks `g2'(q) / g1'(q) = q` by central differences of `g1` and `g2` at `q`.
pub fn check_pairing(kind: NonlinearityKind, q: f64, h: f64, tol: f64) -> Result<bool> {
    if !(q > 0.0) {
        return Err(Error::Domain(format!("pairing check needs q > 0, got {q}")));
    }
    if !(h > 0.0) || q - h <= 0.0 {
        return Err(Error::Domain(format!("step {h} must satisfy 0 < h < q = {q}")));
    }
    let (g1_hi, g2_hi) = g_values(kind, (q + h).ln())?;
    let (g1_lo, g2_lo) = g_values(kind, (q - h).ln())?;
    let d1 = (g1_hi - g1_lo) / (2.0 * h);
    let d2 = (g2_hi - g2_lo) / (2.0 * h);
    Ok((d2 / d1 - q).abs() <= tol * q)
}

/// What the asymptotic analysis needs from a nonlinearity: `log g2'(e^ℓ)`.
///
/// The gradient weights follow from the pairing identity:
/// `w_d = g1'(q)q = g2'(q)` and `w_n = g2'(q)q`.
pub trait Nonlinearity: Send + Sync {
    fn log_g2_prime(&self, l: f64) -> f64;

    fn name(&self) -> String;

    fn weights(&self, l: f64) -> WeightPair {
        let lg = self.log_g2_prime(l);
        WeightPair {
            w_d: lg.exp(),
            w_n: (lg + l).exp(),
        }
    }
}

impl Nonlinearity for NonlinearityKind {
    #[inline]
    fn log_g2_prime(&self, l: f64) -> f64 {
        match self {
            NonlinearityKind::Is => 0.0,
            NonlinearityKind::Po => l,
            NonlinearityKind::Nc => -softplus(l),
            NonlinearityKind::InvPo => -2.0 * l,
            NonlinearityKind::InvIs => -l,
        }
    }

    fn name(&self) -> String {
        self.token().to_string()
    }

    #[inline]
    fn weights(&self, l: f64) -> WeightPair {
        self.weights_unchecked(l)
    }
}

/// A user-supplied pair given by `g2'` as a function of the log-ratio.
///
/// `g1'` is implied by the pairing identity; `g1` and `g2` themselves are never
/// needed for the gradient or the asymptotic analysis.
#[derive(Clone)]
pub struct CustomPair {
    name: String,
    g2_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CustomPair {
    pub fn new(name: impl Into<String>, g2_prime: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            g2_prime: Arc::new(g2_prime),
        }
    }

    pub fn g2_prime(&self, l: f64) -> f64 {
        (self.g2_prime)(l)
    }
}

impl fmt::Debug for CustomPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPair").field("name", &self.name).finish()
    }
}

impl Nonlinearity for CustomPair {
    fn log_g2_prime(&self, l: f64) -> f64 {
        (self.g2_prime)(l).ln()
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}
