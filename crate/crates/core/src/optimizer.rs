//! Nonlinear conjugate-gradient ascent with a strong-Wolfe line search.
//!
//! Directions follow Polak–Ribière⁺ and restart to steepest ascent every
//! `restart_period` iterations or whenever the coefficient goes negative. The
//! line search works on `-J`; evaluations flagged as diverged count as `+∞` and
//! shrink the trial step by halving.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Something to maximize.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, theta: &DVector<f64>) -> Evaluation;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub diverged: bool,
}

impl Evaluation {
    pub fn diverged(dim: usize) -> Self {
        Self {
            value: f64::NEG_INFINITY,
            gradient: DVector::zeros(dim),
            diverged: true,
        }
    }

    fn usable(&self) -> bool {
        !self.diverged && self.value.is_finite() && self.gradient.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop when the gradient ∞-norm falls below this.
    pub grad_tol: f64,
    /// Stop when a step moves no coordinate by more than `step_tol·(1 + ‖θ‖∞)`.
    pub step_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Iterations between forced restarts; `None` means the parameter dimension.
    pub restart_period: Option<usize>,
    pub max_line_search: usize,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            step_tol: 1e-10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.1,
            restart_period: None,
            max_line_search: 40,
            max_halvings: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidInput(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.restart_period == Some(0) {
            return Err(Error::InvalidInput("restart period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchFailed,
    Diverged,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::LineSearchFailed => "line_search_failed",
            Status::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Entry 0 is the starting point; one entry per accepted step after that.
    pub entries: Vec<TraceEntry>,
    pub status: Status,
    pub evaluations: usize,
}

impl OptimizationTrace {
    pub fn iterations(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn final_objective(&self) -> f64 {
        self.entries.last().map(|e| e.objective).unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A point on the search line, stored for the minimization of `-J`.
#[derive(Clone)]
struct LinePoint {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    dg: f64,
}

enum LineOutcome {
    Accepted(LinePoint),
    Failed,
    Diverged,
}

struct LineSearch<'a, O: Objective + ?Sized> {
    objective: &'a O,
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    f0: f64,
    dg0: f64,
    config: &'a OptimizerConfig,
    evaluations: usize,
    halvings: usize,
}

/// Minimizer of the cubic through two points with slopes, or `None` when it has none.
fn cubic_minimizer(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

impl<O: Objective + ?Sized> LineSearch<'_, O> {
    fn eval(&mut self, alpha: f64) -> Option<LinePoint> {
        let e = self.objective.evaluate(&(self.x + self.d * alpha));
        self.evaluations += 1;
        if !e.usable() {
            return None;
        }
        let g = -e.gradient;
        let dg = g.dot(self.d);
        Some(LinePoint {
            alpha,
            f: -e.value,
            g,
            dg,
        })
    }

    fn armijo(&self, p: &LinePoint) -> bool {
        p.f <= self.f0 + self.config.wolfe_c1 * p.alpha * self.dg0
    }

    fn curvature(&self, p: &LinePoint) -> bool {
        p.dg.abs() <= -self.config.wolfe_c2 * self.dg0
    }

    fn run(&mut self, g0: &DVector<f64>, alpha0: f64) -> LineOutcome {
        let mut prev = LinePoint {
            alpha: 0.0,
            f: self.f0,
            g: g0.clone(),
            dg: self.dg0,
        };
        let mut alpha = alpha0;
        let mut ceiling = f64::INFINITY;
        for i in 0..self.config.max_line_search {
            let Some(cur) = self.eval(alpha) else {
                self.halvings += 1;
                if self.halvings > self.config.max_halvings {
                    return if prev.alpha > 0.0 {
                        LineOutcome::Accepted(prev)
                    } else {
                        LineOutcome::Diverged
                    };
                }
                ceiling = alpha;
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            };
            if !self.armijo(&cur) || (i > 0 && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return LineOutcome::Accepted(cur);
            }
            if cur.dg >= 0.0 {
                return self.zoom(cur, prev);
            }
            let span = cur.alpha - prev.alpha;
            let guess = cubic_minimizer(prev.alpha, prev.f, prev.dg, cur.alpha, cur.f, cur.dg)
                .unwrap_or(cur.alpha + 4.0 * span);
            let mut next = guess.clamp(cur.alpha + 1.1 * span, cur.alpha + 8.0 * span);
            if next >= ceiling {
                next = 0.5 * (cur.alpha + ceiling);
            }
            prev = cur;
            alpha = next;
        }
        if prev.alpha > 0.0 {
            LineOutcome::Accepted(prev)
        } else {
            LineOutcome::Failed
        }
    }

    /// Narrow `[lo, hi]` where `lo` satisfies sufficient decrease and has the lowest value.
    fn zoom(&mut self, mut lo: LinePoint, mut hi: LinePoint) -> LineOutcome {
        for _ in 0..self.config.max_line_search {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1e-300) {
                break;
            }
            let trial = if hi.f.is_finite() {
                cubic_minimizer(lo.alpha, lo.f, lo.dg, hi.alpha, hi.f, hi.dg)
            } else {
                None
            };
            let alpha = trial
                .filter(|t| *t > a + 0.1 * width && *t < b - 0.1 * width)
                .unwrap_or(0.5 * (a + b));
            match self.eval(alpha) {
                None => {
                    self.halvings += 1;
                    if self.halvings > self.config.max_halvings {
                        break;
                    }
                    hi = LinePoint {
                        alpha,
                        f: f64::INFINITY,
                        g: DVector::zeros(0),
                        dg: f64::NAN,
                    };
                }
                Some(cur) => {
                    if !self.armijo(&cur) || cur.f >= lo.f {
                        hi = cur;
                    } else {
                        if self.curvature(&cur) {
                            return LineOutcome::Accepted(cur);
                        }
                        if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                            hi = lo;
                        }
                        lo = cur;
                    }
                }
            }
        }
        if lo.alpha > 0.0 {
            LineOutcome::Accepted(lo)
        } else if self.halvings > self.config.max_halvings {
            LineOutcome::Diverged
        } else {
            LineOutcome::Failed
        }
    }

    /// One interpolation step from the origin; exact on quadratics.
    fn refine(&mut self, p: LinePoint) -> LinePoint {
        let Some(t) = cubic_minimizer(0.0, self.f0, self.dg0, p.alpha, p.f, p.dg) else {
            return p;
        };
        if !(t > 0.0 && t <= 4.0 * p.alpha) || (t - p.alpha).abs() <= 1e-6 * p.alpha {
            return p;
        }
        match self.eval(t) {
            Some(q) if q.f < p.f && self.armijo(&q) => q,
            _ => p,
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximizes `objective` from `theta0`.
pub fn maximize<O: Objective + ?Sized>(
    objective: &O,
    theta0: DVector<f64>,
    config: &OptimizerConfig,
) -> Result<(DVector<f64>, OptimizationTrace)> {
    config.validate()?;
    if theta0.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            got: theta0.len(),
        });
    }
    let start = objective.evaluate(&theta0);
    if !start.usable() {
        return Err(Error::NonFiniteStart);
    }
    let restart_period = config.restart_period.unwrap_or(objective.dim());
    let mut x = theta0;
    let mut f = -start.value;
    let mut g = -start.gradient;
    let mut evaluations = 1;
    let mut entries = vec![TraceEntry {
        iter: 0,
        objective: -f,
        grad_norm: inf_norm(&g),
        step: 0.0,
    }];
    let mut d = -&g;
    let mut steepest = true;
    let mut since_restart = 0;
    let mut last_alpha_dg: Option<f64> = None;

    let status = loop {
        if inf_norm(&g) <= config.grad_tol {
            break Status::Converged;
        }
        if entries.len() > config.max_iters {
            break Status::MaxIters;
        }
        let mut dg = g.dot(&d);
        if !(dg < 0.0) {
            d = -&g;
            dg = g.dot(&d);
            steepest = true;
            since_restart = 0;
        }
        let fallback = 1.0f64.min(1.0 / inf_norm(&d));
        let alpha0 = last_alpha_dg
            .map(|ad| (ad / dg).min(1e3 * fallback))
            .filter(|a| a.is_finite() && *a > 0.0)
            .unwrap_or(fallback);

        let mut ls = LineSearch {
            objective,
            x: &x,
            d: &d,
            f0: f,
            dg0: dg,
            config,
            evaluations: 0,
            halvings: 0,
        };
        let outcome = ls.run(&g, alpha0);
        let outcome = match outcome {
            LineOutcome::Accepted(p) => LineOutcome::Accepted(ls.refine(p)),
            other => other,
        };
        evaluations += ls.evaluations;
        let point = match outcome {
            LineOutcome::Accepted(p) => p,
            failed if !steepest => {
                // retry once along steepest descent before giving up
                let _ = failed;
                d = -&g;
                steepest = true;
                since_restart = 0;
                last_alpha_dg = None;
                continue;
            }
            LineOutcome::Failed => break Status::LineSearchFailed,
            LineOutcome::Diverged => break Status::Diverged,
        };

        let step = &d * point.alpha;
        x += &step;
        f = point.f;
        let g_new = point.g;
        let step_norm = inf_norm(&step);
        entries.push(TraceEntry {
            iter: entries.len(),
            objective: -f,
            grad_norm: inf_norm(&g_new),
            step: step_norm,
        });
        last_alpha_dg = Some(point.alpha * dg);
        if step_norm <= config.step_tol * (1.0 + inf_norm(&x)) {
            break Status::Converged;
        }

        since_restart += 1;
        let beta = if since_restart >= restart_period {
            since_restart = 0;
            0.0
        } else {
            (g_new.dot(&(&g_new - &g)) / g.dot(&g)).max(0.0)
        };
        d = -&g_new + &d * beta;
        steepest = beta == 0.0;
        g = g_new;
    };

    Ok((
        x,
        OptimizationTrace {
            entries,
            status,
            evaluations,
        },
    ))
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, theta: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut out = DVector::zeros(theta.len());
    let mut t = theta.clone();
    for k in 0..theta.len() {
        let orig = t[k];
        t[k] = orig + h;
        let fp = f(&t);
        t[k] = orig - h;
        let fm = f(&t);
        t[k] = orig;
        out[k] = (fp - fm) / (2.0 * h);
    }
    out
}
