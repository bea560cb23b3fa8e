//! One-dimensional composite Simpson quadrature.

/// Nodes and weights of composite Simpson's rule on `[lo, hi]` with `intervals`
/// subintervals (rounded up to even).
pub fn simpson_rule(lo: f64, hi: f64, intervals: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (intervals.max(2) + 1) & !1;
    let h = (hi - lo) / n as f64;
    let mut nodes = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    for i in 0..=n {
        nodes.push(lo + h * i as f64);
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        weights.push(w * h / 3.0);
    }
    (nodes, weights)
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    let (nodes, weights) = simpson_rule(lo, hi, intervals);
    nodes.iter().zip(&weights).map(|(&x, &w)| w * f(x)).sum()
}

/// `log ∫ exp(log_f)` over `[lo, hi]`, stabilized by the maximum of `log_f` on the grid.
pub fn log_integrate_exp<F: Fn(f64) -> f64>(log_f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    let (nodes, weights) = simpson_rule(lo, hi, intervals);
    let logs: Vec<f64> = nodes.iter().map(|&x| log_f(x)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().zip(&weights).map(|(&l, &w)| w * (l - m).exp()).sum();
    m + s.ln()
}
