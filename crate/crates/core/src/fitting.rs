//! Least-squares fits of cosine, sigmoid and power-law models, and the
//! lifetime read off each.
//!
//! All nonlinear fits go through one Levenberg–Marquardt loop with
//! Marquardt's diagonal scaling and analytic Jacobians. Points are weighted
//! uniformly, so traces recorded on logarithmic grids are fitted per sample,
//! not per unit time.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::observables::TimeTrace;

/// Lifetimes outside `[1e2, 1e10]` periods cannot be resolved on the default
/// grids.
pub const RESOLVABLE_MIN: f64 = 1e2;
pub const RESOLVABLE_MAX: f64 = 1e10;

const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("need at least {needed} usable points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("power-law inputs must be positive, got ({x}, {y})")]
    NonPositive { x: f64, y: f64 },

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("period cannot be resolved: {0}")]
    Unresolvable(String),

    #[error("series does not decay")]
    NonDecaying,

    #[error("fit diverged after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("normal equations are singular")]
    Singular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    /// `A cos(2π t / T_R)`.
    Cosine,
    /// `A e^{−t/τ} cos(2π t / T_R)`; opt-in only.
    DampedCosine,
    /// `c / (1 + e^{α t})`.
    Sigmoid,
    /// `a x^β`.
    PowerLaw,
    /// `a x^β + c`.
    PowerLawWithOffset,
}

/// Inclusive range of abscissae (period indices for traces) used by a fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub start: f64,
    /// `None` is unbounded.
    pub end: Option<f64>,
}

impl FitWindow {
    pub fn new(start: f64, end: Option<f64>) -> Self {
        FitWindow { start, end }
    }

    pub fn from(start: f64) -> Self {
        FitWindow { start, end: None }
    }

    pub fn all() -> Self {
        FitWindow::from(f64::NEG_INFINITY)
    }

    /// Cosine default: skip the initial fast decay, `n ≥ 100`.
    pub fn after_initial_decay() -> Self {
        FitWindow::from(100.0)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.start && self.end.map_or(true, |e| x <= e)
    }
}

impl Default for FitWindow {
    fn default() -> Self {
        FitWindow::after_initial_decay()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitKind,
    pub params: BTreeMap<String, f64>,
    /// One-sigma uncertainties, same keys as `params`.
    pub sigmas: BTreeMap<String, f64>,
    /// Range actually fitted; progressive fits may stop short of the
    /// requested window.
    pub window: FitWindow,
    pub points: usize,
    /// `T_R` for cosines, `1/α` for sigmoids; absent for power laws and
    /// unconverged fits.
    pub lifetime: Option<f64>,
    /// `sqrt(Σ r²)`.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.sigmas.get(name).copied()
    }
}

struct Solution<const N: usize> {
    params: [f64; N],
    sigmas: [f64; N],
    rss: f64,
    iterations: usize,
    converged: bool,
}

/// Minimises `Σ (f(p, x_i) − y_i)²`. `model` returns the value and the
/// gradient in `p`; a non-finite value marks `p` as inadmissible.
fn levenberg_marquardt<const N: usize, F>(xs: &[f64], ys: &[f64], start: [f64; N], model: F) -> Result<Solution<N>, FitError>
where
    F: Fn(&[f64; N], f64) -> (f64, [f64; N]),
{
    let m = xs.len();
    if m < N {
        return Err(FitError::TooFewPoints { needed: N, found: m });
    }
    let rss_at = |p: &[f64; N]| -> f64 {
        let mut rss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let r = model(p, *x).0 - y;
            rss += r * r;
        }
        if rss.is_finite() {
            rss
        } else {
            f64::INFINITY
        }
    };
    let normal_equations = |p: &[f64; N]| -> ([[f64; N]; N], [f64; N]) {
        let mut a = [[0.0; N]; N];
        let mut g = [0.0; N];
        for (x, y) in xs.iter().zip(ys) {
            let (f, grad) = model(p, *x);
            let r = f - y;
            for i in 0..N {
                g[i] += grad[i] * r;
                for j in 0..=i {
                    a[i][j] += grad[i] * grad[j];
                }
            }
        }
        for i in 0..N {
            for j in 0..i {
                a[j][i] = a[i][j];
            }
        }
        (a, g)
    };

    let mut p = start;
    let mut rss = rss_at(&p);
    if !rss.is_finite() {
        return Err(FitError::NoConvergence { iterations: 0 });
    }
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if rss <= 1e-30 * scale {
            converged = true;
            break;
        }
        let (a, g) = normal_equations(&p);
        let diag_floor = (0..N).map(|i| a[i][i]).fold(0.0, f64::max) * 1e-15;
        let mut accepted = None;
        while lambda < 1e16 {
            let mut damped = a;
            for i in 0..N {
                damped[i][i] += lambda * a[i][i].max(diag_floor);
            }
            let neg_g = g.map(|v| -v);
            if let Some(step) = solve(damped, neg_g) {
                let mut trial = p;
                for i in 0..N {
                    trial[i] += step[i];
                }
                let trial_rss = rss_at(&trial);
                if trial_rss < rss {
                    accepted = Some((trial, trial_rss, step));
                    break;
                }
            }
            lambda *= 10.0;
        }
        match accepted {
            None => {
                // no descent direction left at machine precision
                converged = true;
                break;
            }
            Some((trial, trial_rss, step)) => {
                let small_step = (0..N).all(|i| step[i].abs() <= 1e-13 * (p[i].abs() + 1e-13));
                let small_gain = rss - trial_rss <= 1e-15 * rss;
                p = trial;
                rss = trial_rss;
                lambda = (lambda / 10.0).max(1e-15);
                if small_step || small_gain {
                    converged = true;
                    break;
                }
            }
        }
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NoConvergence { iterations });
    }

    let (a, _) = normal_equations(&p);
    let variance = if m > N { rss / (m - N) as f64 } else { 0.0 };
    let mut sigmas = [0.0; N];
    if let Some(inverse) = invert(a) {
        for i in 0..N {
            sigmas[i] = (inverse[i][i].max(0.0) * variance).sqrt();
        }
    }
    Ok(Solution {
        params: p,
        sigmas,
        rss,
        iterations,
        converged,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let norm = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[pivot][col].abs() > 1e-300_f64.max(norm * 1e-18)) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn invert<const N: usize>(a: [[f64; N]; N]) -> Option<[[f64; N]; N]> {
    let mut inv = [[0.0; N]; N];
    for k in 0..N {
        let mut e = [0.0; N];
        e[k] = 1.0;
        let col = solve(a, e)?;
        for i in 0..N {
            inv[i][k] = col[i];
        }
    }
    Some(inv)
}

fn windowed(points: &[(f64, f64)], window: &FitWindow) -> Result<(Vec<f64>, Vec<f64>), FitError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(x, y) in points {
        if !window.contains(x) {
            continue;
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(FitError::NonFinite);
        }
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

fn named<const N: usize>(names: [&str; N], values: [f64; N]) -> BTreeMap<String, f64> {
    names.iter().map(|n| n.to_string()).zip(values).collect()
}

fn cosine(p: &[f64; 2], t: f64) -> (f64, [f64; 2]) {
    let [a, period] = *p;
    if !(period > 0.0) {
        return (f64::NAN, [0.0; 2]);
    }
    let phase = 2.0 * PI * t / period;
    let (s, c) = phase.sin_cos();
    (a * c, [c, a * s * phase / period])
}

fn damped_cosine(p: &[f64; 3], t: f64) -> (f64, [f64; 3]) {
    let [a, period, ln_tau] = *p;
    if !(period > 0.0) {
        return (f64::NAN, [0.0; 3]);
    }
    let envelope = (-t * (-ln_tau).exp()).exp();
    let phase = 2.0 * PI * t / period;
    let (s, c) = phase.sin_cos();
    let f = a * envelope * c;
    (f, [envelope * c, a * envelope * s * phase / period, f * t * (-ln_tau).exp()])
}

/// Options for [`fit_cosine_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineOptions {
    /// Fit `A e^{−t/τ} cos(2πt/T_R)` instead of the plain cosine.
    pub damped: bool,
}

/// Fits stop growing their window once it spans this many estimated
/// periods; on 30-point-per-decade grids later samples alias.
const COSINE_WINDOW_PERIODS: f64 = 4.0;

/// `A cos(2π t / T_R)` with `A > 0`, lifetime `T_R`.
///
/// The first zero crossing `t0` inside `window` seeds `T_R ∈ {4t0/(2k+1)}`;
/// each candidate is fitted up to `2 t0` and the best kept. The window then
/// doubles until it covers four periods or the data end. A window without a
/// crossing cannot resolve the period.
pub fn fit_cosine_points(points: &[(f64, f64)], window: FitWindow) -> Result<FitResult, FitError> {
    fit_cosine_with(points, window, CosineOptions::default())
}

pub fn fit_cosine_with(points: &[(f64, f64)], window: FitWindow, options: CosineOptions) -> Result<FitResult, FitError> {
    let (xs, ys) = windowed(points, &window)?;
    if xs.len() < 4 {
        return Err(FitError::TooFewPoints { needed: 4, found: xs.len() });
    }
    let t0 = first_zero_crossing(&xs, &ys)
        .ok_or_else(|| FitError::Unresolvable("no zero crossing inside the fit window".into()))?;

    let upto = |limit: f64| -> usize {
        let n = xs.partition_point(|x| *x <= limit);
        n.max(8).min(xs.len())
    };
    let amplitude0 = ys[..upto(2.0 * t0)].iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let spacing = (xs[1] - xs[0]).max(f64::MIN_POSITIVE);

    // candidate periods from the crossing; the grid search is the fallback
    let mut candidates: Vec<f64> = (0..200)
        .map(|k| 4.0 * t0 / (2 * k + 1) as f64)
        .take_while(|p| *p >= 4.0 * spacing)
        .collect();
    let mut best = best_cosine(&xs, &ys, upto(2.0 * t0), amplitude0, &candidates);
    if best.is_none() {
        let (lo, hi) = ((4.0 * spacing).ln(), (8.0 * xs[xs.len() - 1]).ln());
        candidates = (0..=120).map(|k| (lo + (hi - lo) * k as f64 / 120.0).exp()).collect();
        best = best_cosine(&xs, &ys, upto(2.0 * t0), amplitude0, &candidates);
    }
    let mut fit = best.ok_or(FitError::NoConvergence { iterations: 0 })?;
    let mut limit = 2.0 * t0;
    let x_last = xs[xs.len() - 1];
    loop {
        let cap = (COSINE_WINDOW_PERIODS * fit.params[1]).min(x_last);
        if limit >= cap {
            break;
        }
        limit = (2.0 * limit).min(cap);
        let n = upto(limit);
        fit = levenberg_marquardt(&xs[..n], &ys[..n], fit.params, cosine)?;
    }
    let n = upto(limit);
    let used = FitWindow::new(xs[0], Some(xs[n - 1]));

    if options.damped {
        let tau0 = 10.0 * xs[n - 1];
        let d = levenberg_marquardt(&xs[..n], &ys[..n], [fit.params[0], fit.params[1], tau0.ln()], damped_cosine)?;
        let [a, period, ln_tau] = d.params;
        let (ok, converged) = (a > 0.0 && period > 0.0, d.converged);
        return Ok(FitResult {
            model: FitKind::DampedCosine,
            params: named(["A", "T_R", "tau"], [a, period, ln_tau.exp()]),
            sigmas: named(["A", "T_R", "tau"], [d.sigmas[0], d.sigmas[1], ln_tau.exp() * d.sigmas[2]]),
            window: used,
            points: n,
            lifetime: (ok && converged).then_some(period),
            residual: d.rss.sqrt(),
            converged,
            iterations: d.iterations,
        });
    }

    let [a, period] = fit.params;
    Ok(FitResult {
        model: FitKind::Cosine,
        params: named(["A", "T_R"], [a, period]),
        sigmas: named(["A", "T_R"], fit.sigmas),
        window: used,
        points: n,
        lifetime: (fit.converged && a > 0.0).then_some(period),
        residual: fit.rss.sqrt(),
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

fn best_cosine(xs: &[f64], ys: &[f64], n: usize, amplitude: f64, candidates: &[f64]) -> Option<Solution<2>> {
    candidates
        .iter()
        .filter_map(|period| levenberg_marquardt(&xs[..n], &ys[..n], [amplitude, *period], cosine).ok())
        .filter(|s| s.params[0] > 0.0 && s.params[1] > 0.0)
        .min_by(|a, b| a.rss.total_cmp(&b.rss))
}

/// Linearly interpolated first sign change.
fn first_zero_crossing(xs: &[f64], ys: &[f64]) -> Option<f64> {
    for k in 1..xs.len() {
        let (y0, y1) = (ys[k - 1], ys[k]);
        if y0 == 0.0 {
            continue;
        }
        if y1 == 0.0 || (y0 > 0.0) != (y1 > 0.0) {
            return Some(xs[k - 1] + (xs[k] - xs[k - 1]) * y0 / (y0 - y1));
        }
    }
    None
}

/// `c / (1 + e^{α t})` with `α = e^{p₁}`, evaluated without overflow.
fn sigmoid(p: &[f64; 2], t: f64) -> (f64, [f64; 2]) {
    let [c, ln_alpha] = *p;
    let z = ln_alpha.exp() * t;
    // s = 1/(1+e^z), 1 − s = 1/(1+e^{−z})
    let (s, one_minus_s) = if z > 0.0 {
        let e = (-z).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = z.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    };
    (c * s, [s, -c * z * s * one_minus_s])
}

/// `c / (1 + e^{αt})`, lifetime `1/α`.
pub fn fit_sigmoid_points(points: &[(f64, f64)], window: FitWindow) -> Result<FitResult, FitError> {
    let (xs, ys) = windowed(points, &window)?;
    if xs.len() < 4 {
        return Err(FitError::TooFewPoints { needed: 4, found: xs.len() });
    }
    let head = (xs.len() / 10).clamp(1, 5);
    let early = ys[..head].iter().sum::<f64>() / head as f64;
    let late = ys[ys.len() - head..].iter().sum::<f64>() / head as f64;
    if !(early > 0.0 && late < early) {
        return Err(FitError::NonDecaying);
    }
    // c/2 at t ≪ 1/α, c/4 at αt = ln 3
    let quarter = xs
        .iter()
        .zip(&ys)
        .find(|(_, y)| **y <= 0.5 * early)
        .map_or(xs[xs.len() - 1], |(x, _)| *x)
        .max(f64::MIN_POSITIVE);
    let start = [2.0 * early, (3f64.ln() / quarter).ln()];
    let s = levenberg_marquardt(&xs, &ys, start, sigmoid)?;
    let [c, ln_alpha] = s.params;
    let alpha = ln_alpha.exp();
    Ok(FitResult {
        model: FitKind::Sigmoid,
        params: named(["c", "alpha"], [c, alpha]),
        sigmas: named(["c", "alpha"], [s.sigmas[0], alpha * s.sigmas[1]]),
        window: FitWindow::new(xs[0], Some(xs[xs.len() - 1])),
        points: xs.len(),
        lifetime: s.converged.then_some(1.0 / alpha),
        residual: s.rss.sqrt(),
        converged: s.converged,
        iterations: s.iterations,
    })
}

/// Points whose lifetime lies in `[lo, hi]`; every input must be positive.
fn admissible(points: &[(f64, f64)], lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<f64>), FitError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(x, y) in points {
        if !(x.is_finite() && y.is_finite()) {
            return Err(FitError::NonFinite);
        }
        if !(x > 0.0 && y > 0.0) {
            return Err(FitError::NonPositive { x, y });
        }
        if (lo..=hi).contains(&y) {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 3 {
        return Err(FitError::TooFewPoints { needed: 3, found: xs.len() });
    }
    Ok((xs, ys))
}

/// `a x^β` (log-log regression) or `a x^β + c` (fitted on log residuals,
/// seeded by the regression and `c = min(y)/2`). Lifetimes outside
/// `[1e2, 1e10]` are dropped first.
pub fn fit_power_law(points: &[(f64, f64)], with_offset: bool) -> Result<FitResult, FitError> {
    fit_power_law_within(points, with_offset, RESOLVABLE_MIN, RESOLVABLE_MAX)
}

pub fn fit_power_law_within(points: &[(f64, f64)], with_offset: bool, lo: f64, hi: f64) -> Result<FitResult, FitError> {
    let (xs, ys) = admissible(points, lo, hi)?;
    let window = FitWindow::new(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        Some(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
    );
    let (ln_a, beta, sigma_ln_a, sigma_beta, rss) = log_log_regression(&xs, &ys)?;
    if !with_offset {
        let a = ln_a.exp();
        return Ok(FitResult {
            model: FitKind::PowerLaw,
            params: named(["a", "beta"], [a, beta]),
            sigmas: named(["a", "beta"], [a * sigma_ln_a, sigma_beta]),
            window,
            points: xs.len(),
            lifetime: None,
            residual: rss.sqrt(),
            converged: true,
            iterations: 1,
        });
    }

    let log_ys: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let c0 = ys.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    let s = levenberg_marquardt(&xs, &log_ys, [ln_a, beta, c0], |p, x| {
        let [ln_a, beta, c] = *p;
        let power = (ln_a + beta * x.ln()).exp();
        let m = power + c;
        if !(m > 0.0) {
            return (f64::NAN, [0.0; 3]);
        }
        (m.ln(), [power / m, power * x.ln() / m, 1.0 / m])
    })?;
    let [ln_a, beta, c] = s.params;
    let a = ln_a.exp();
    Ok(FitResult {
        model: FitKind::PowerLawWithOffset,
        params: named(["a", "beta", "c"], [a, beta, c]),
        sigmas: named(["a", "beta", "c"], [a * s.sigmas[0], s.sigmas[1], s.sigmas[2]]),
        window,
        points: xs.len(),
        lifetime: None,
        residual: s.rss.sqrt(),
        converged: s.converged,
        iterations: s.iterations,
    })
}

/// `ln y = ln a + β ln x` by ordinary least squares, with standard errors.
fn log_log_regression(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64, f64), FitError> {
    let m = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(FitError::Singular);
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    let ln_a = my - beta * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - ln_a - beta * x).powi(2)).sum();
    let s2 = if m > 2.0 { rss / (m - 2.0) } else { 0.0 };
    let sigma_beta = (s2 / sxx).sqrt();
    let sigma_ln_a = (s2 * (1.0 / m + mx * mx / sxx)).sqrt();
    Ok((ln_a, beta, sigma_ln_a, sigma_beta, rss))
}

/// Cosine fit of one series of a trace, abscissa in periods.
pub fn fit_cosine(trace: &TimeTrace, series: &str, window: FitWindow) -> crate::Result<FitResult> {
    Ok(fit_cosine_points(&trace.points(series)?, window)?)
}

/// Sigmoid fit of one series of a trace, abscissa in periods.
pub fn fit_sigmoid(trace: &TimeTrace, series: &str, window: FitWindow) -> crate::Result<FitResult> {
    Ok(fit_sigmoid_points(&trace.points(series)?, window)?)
}
