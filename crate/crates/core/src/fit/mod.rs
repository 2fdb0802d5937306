//! Weighted nonlinear least squares and the named fits used by the analysis.

mod engine;
mod models;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{qp_coupling, DeviceParams};
use crate::synth::{MeasurementTrace, Protocol};

pub use engine::{central_difference_gradient, nlls_fit, FitConfig, FitResult, Model, Observations};
pub use models::{Affine, DampedCosine, ExpDecay, ExpDecayNoOffset, RecoveryModel, TrappingModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {need} data points, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
    #[error("normal matrix is singular (parameters not identifiable)")]
    RankDeficient,
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("degenerate design: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, FitError>;

/// One fitted decay rate at a delay after the pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Delay after the optical pulse, s.
    pub tau: f64,
    /// Decay rate, s⁻¹.
    pub gamma: f64,
    /// Standard error of `gamma`.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub gamma: f64,
    pub gamma_err: f64,
    pub result: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    pub t2_star: f64,
    pub t2_star_err: f64,
    /// Oscillation frequency, Hz (always positive).
    pub detune: f64,
    pub detune_err: f64,
    pub result: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryFit {
    pub x_in: f64,
    pub x_in_err: f64,
    pub gamma0: f64,
    pub gamma0_err: f64,
    pub result: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappingFit {
    pub s: f64,
    pub s_err: f64,
    pub x_in: f64,
    pub gamma0: f64,
    pub result: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub slope_err: f64,
    pub intercept: f64,
    pub intercept_err: f64,
    pub result: FitResult,
}

/// Weighted linear least squares on an explicit design; returns coefficients and χ².
fn design_lsq(design: &[Vec<f64>], y: &[f64], sigma: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = y.len();
    let m = design.first()?.len();
    let a = DMatrix::from_fn(n, m, |i, j| design[i][j] / sigma[i]);
    let b = DVector::from_iterator(n, y.iter().zip(sigma).map(|(y, s)| y / s));
    let coef = a.clone().svd(true, true).solve(&b, 1e-13).ok()?;
    let chi2 = (&a * &coef - &b).norm_squared();
    coef.iter().all(|c| c.is_finite()).then(|| (coef.iter().copied().collect(), chi2))
}

/// Weighted least squares for `y ≈ a·u + b`; returns `([a, b], χ²)`.
/// Closed form in centred sums, used for the grid scans.
fn affine_lsq(u: &[f64], y: &[f64], sigma: &[f64]) -> Option<([f64; 2], f64)> {
    let (mut sw, mut su, mut sy) = (0.0, 0.0, 0.0);
    for ((u, y), s) in u.iter().zip(y).zip(sigma) {
        let w = 1.0 / (s * s);
        sw += w;
        su += w * u;
        sy += w * y;
    }
    let (um, ym) = (su / sw, sy / sw);
    let (mut suu, mut suy) = (0.0, 0.0);
    for ((u, y), s) in u.iter().zip(y).zip(sigma) {
        let w = 1.0 / (s * s);
        suu += w * (u - um) * (u - um);
        suy += w * (u - um) * (y - ym);
    }
    if !(suu > 1e-300) {
        return None;
    }
    let a = suy / suu;
    let b = ym - a * um;
    let chi2 = u.iter().zip(y).zip(sigma).map(|((u, y), s)| ((y - a * u - b) / s).powi(2)).sum();
    (a.is_finite() && b.is_finite()).then_some(([a, b], chi2))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
}

fn expect_protocol(trace: &MeasurementTrace, want: Protocol) -> Result<()> {
    if trace.protocol != want {
        return Err(FitError::InvalidInput(format!("expected a {want} trace, got {}", trace.protocol)));
    }
    trace.validate().map_err(|e| FitError::InvalidInput(e.to_string()))
}

/// Fit `A·e^{−Γt} + B` to a T1 trace.
///
/// Γ is initialized by a log-spaced scan with `A`, `B` solved linearly at each
/// candidate, so the fit also starts sensibly on traces that have decayed almost
/// entirely within the first sample. Γ is constrained to be non-negative.
pub fn fit_exponential(trace: &MeasurementTrace) -> Result<ExpFit> {
    expect_protocol(trace, Protocol::T1Decay)?;
    fit_exponential_raw(&trace.times, &trace.values, &trace.sigma)
}

pub fn fit_exponential_raw(t: &[f64], y: &[f64], sigma: &[f64]) -> Result<ExpFit> {
    if t.len() < 4 {
        return Err(FitError::InsufficientData { have: t.len(), need: 4 });
    }
    let span = t[t.len() - 1] - t[0];
    let dt = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if !(span > 0.0 && dt > 0.0) {
        return Err(FitError::Degenerate("time grid has no extent".into()));
    }
    let tail = (t.len() / 10).max(1);
    let b_tail = y[y.len() - tail..].iter().sum::<f64>() / tail as f64;
    let mut best = (f64::INFINITY, vec![y[0] - b_tail, 1.0 / span, b_tail]);
    for g in log_grid(0.05 / span, 20.0 / dt, 80) {
        let u: Vec<f64> = t.iter().map(|ti| (-g * ti).exp()).collect();
        if let Some((c, chi2)) = affine_lsq(&u, y, sigma) {
            if chi2 < best.0 {
                best = (chi2, vec![c[0], g, c[1]]);
            }
        }
    }
    let cfg = FitConfig::default().with_bounds(vec![
        (f64::NEG_INFINITY, f64::INFINITY),
        (0.0, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
    ]);
    let result = nlls_fit(&ExpDecay, &Observations::new(t, y, sigma), &best.1, &cfg)?;
    Ok(ExpFit { gamma: result.params[1], gamma_err: result.stderr[1], result })
}

/// Fit a damped cosine `A·e^{−t/T₂*}·cos(2πft + φ) + B` to a Ramsey trace.
///
/// The frequency starts at the largest peak of a discrete Fourier scan; a peak
/// at the lowest resolvable frequency or within three times the median spectral
/// magnitude is an initialization error.
pub fn fit_ramsey(trace: &MeasurementTrace) -> Result<RamseyFit> {
    expect_protocol(trace, Protocol::Ramsey)?;
    fit_ramsey_raw(&trace.times, &trace.values, &trace.sigma)
}

pub fn fit_ramsey_raw(t: &[f64], y: &[f64], sigma: &[f64]) -> Result<RamseyFit> {
    let n = t.len();
    if n < 8 {
        return Err(FitError::InsufficientData { have: n, need: 8 });
    }
    let span = t[n - 1] - t[0];
    if !(span > 0.0) {
        return Err(FitError::Degenerate("time grid has no extent".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let nyquist = 0.5 * (n - 1) as f64 / span;
    let df = 0.25 / span;
    let n_freq = (nyquist / df).floor() as usize;
    if n_freq < 8 {
        return Err(FitError::Initialization("too few samples for a spectral scan".into()));
    }
    let spectrum: Vec<(f64, f64)> = (1..=n_freq)
        .map(|k| {
            let f = k as f64 * df;
            let (mut re, mut im) = (0.0, 0.0);
            for (ti, yi) in t.iter().zip(y) {
                let (s, c) = (2.0 * PI * f * ti).sin_cos();
                re += (yi - mean) * c;
                im += (yi - mean) * s;
            }
            (f, re.hypot(im))
        })
        .collect();
    let (f_peak, peak) = spectrum.iter().copied().fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let mut mags: Vec<f64> = spectrum.iter().map(|s| s.1).collect();
    mags.sort_by(f64::total_cmp);
    let median = mags[mags.len() / 2];
    if f_peak < 1.0 / span || !(peak > 3.0 * median) {
        return Err(FitError::Initialization(format!(
            "no oscillation above the noise floor (peak {peak:.3e} at {f_peak:.3e} Hz, median {median:.3e})"
        )));
    }

    // envelope scan with amplitude, phase and offset solved linearly
    let mut best = (f64::INFINITY, Vec::new());
    for f in [f_peak - df / 2.0, f_peak, f_peak + df / 2.0] {
        for t2 in log_grid(span / 50.0, span * 5.0, 30) {
            let design: Vec<Vec<f64>> = t
                .iter()
                .map(|ti| {
                    let env = (-ti / t2).exp();
                    let (s, c) = (2.0 * PI * f * ti).sin_cos();
                    vec![env * c, env * s, 1.0]
                })
                .collect();
            if let Some((c, chi2)) = design_lsq(&design, y, sigma) {
                if chi2 < best.0 {
                    let amp = c[0].hypot(c[1]);
                    let phase = (-c[1]).atan2(c[0]);
                    best = (chi2, vec![amp, t2, f, phase, c[2]]);
                }
            }
        }
    }
    if best.1.is_empty() {
        return Err(FitError::Initialization("envelope scan failed".into()));
    }
    let cfg = FitConfig::default().with_bounds(vec![
        (f64::NEG_INFINITY, f64::INFINITY),
        (1e-3 * span / n as f64, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
    ]);
    let mut result = nlls_fit(&DampedCosine, &Observations::new(t, y, sigma), &best.1, &cfg)?;
    normalize_cosine(&mut result.params);
    Ok(RamseyFit {
        t2_star: result.params[1],
        t2_star_err: result.stderr[1],
        detune: result.params[2],
        detune_err: result.stderr[2],
        result,
    })
}

/// Map `[A, T₂, f, φ, B]` to the equivalent form with `A ≥ 0`, `f ≥ 0`, `φ ∈ (−π, π]`.
fn normalize_cosine(p: &mut [f64]) {
    if p[2] < 0.0 {
        p[2] = -p[2];
        p[3] = -p[3];
    }
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += PI;
    }
    p[3] = (p[3] + PI).rem_euclid(2.0 * PI) - PI;
}

fn rate_columns(points: &[RatePoint]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        points.iter().map(|p| p.tau).collect(),
        points.iter().map(|p| p.gamma).collect(),
        points.iter().map(|p| p.sigma).collect(),
    )
}

/// Injected density that the recovery model maps to excess rate `excess` at
/// delay `tau`, neglecting the background density.
fn invert_excess(c: f64, s: f64, r: f64, excess: f64, tau: f64) -> f64 {
    let x = (excess / c).max(1e-12);
    if r == 0.0 || s == 0.0 {
        return if r == 0.0 { x * (s * tau).exp() } else { 1.0 / (1.0 / x - r * tau).max(1e-2) };
    }
    let inv = (1.0 / x + r / s) * (-s * tau).exp() - r / s;
    if inv > 0.0 {
        1.0 / inv
    } else {
        1e-2
    }
}

/// Minimise χ² over `ln x_in` with Γ₀ solved for at each trial value, by a
/// grid scan followed by golden-section refinement of the best bracket.
fn profile_recovery(model: &RecoveryModel, obs: &Observations, gamma0_start: f64) -> (f64, f64) {
    let mut gamma0 = gamma0_start;
    let mut chi2_at = |u: f64| -> (f64, f64) {
        let p0 = u.exp();
        // Γ₀ is almost linear (it only shifts the decay constant slightly)
        for _ in 0..30 {
            let (mut num, mut den) = (0.0, 0.0);
            let mut g = [0.0; 2];
            for ((t, y), s) in obs.x.iter().zip(obs.y).zip(obs.sigma) {
                model.gradient(*t, &[p0, gamma0], &mut g);
                let w = 1.0 / (s * s);
                num += w * (y - model.eval(*t, &[p0, gamma0])) * g[1];
                den += w * g[1] * g[1];
            }
            let step = if den > 0.0 { num / den } else { 0.0 };
            gamma0 = (gamma0 + step).max(0.0);
            if !(step.abs() > 1e-14 * gamma0.abs()) {
                break;
            }
        }
        let chi2 = obs
            .x
            .iter()
            .zip(obs.y)
            .zip(obs.sigma)
            .map(|((t, y), s)| ((y - model.eval(*t, &[p0, gamma0])) / s).powi(2))
            .sum::<f64>();
        (if chi2.is_finite() { chi2 } else { f64::INFINITY }, gamma0)
    };
    let (lo, hi) = (1e-12f64.ln(), 0.0);
    let n = 25;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|u| chi2_at(*u).0).collect();
    let best = (0..n).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap_or(0);
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
    let (mut fc, mut fd) = (chi2_at(c).0, chi2_at(d).0);
    while b - a > 1e-10 {
        if fc < fd {
            (b, d, fd) = (d, c, fc);
            c = b - phi * (b - a);
            fc = chi2_at(c).0;
        } else {
            (a, c, fc) = (c, d, fd);
            d = a + phi * (b - a);
            fd = chi2_at(d).0;
        }
    }
    let u = 0.5 * (a + b);
    let (_, g0) = chi2_at(u);
    (u.exp(), g0)
}

/// Fit the recovery of the decay rate with trapping and recombination fixed;
/// free parameters are the injected density and the baseline rate.
pub fn fit_recovery(dev: &DeviceParams, points: &[RatePoint], s: f64, r: f64) -> Result<RecoveryFit> {
    if points.len() < 3 {
        return Err(FitError::InsufficientData { have: points.len(), need: 3 });
    }
    if !(s >= 0.0 && r >= 0.0) {
        return Err(FitError::InvalidInput("s and r must be non-negative".into()));
    }
    let c = qp_coupling(dev);
    let (tau, gamma, sigma) = rate_columns(points);
    let model = RecoveryModel { coupling: c, s, r };

    // exact for r = 0; a starting point otherwise
    let u: Vec<f64> = tau.iter().map(|t| c * (-s * t).exp()).collect();
    let mut init = match affine_lsq(&u, &gamma, &sigma) {
        Some((coef, _)) => vec![coef[0].max(0.0), coef[1].max(0.0)],
        None => vec![0.0, gamma.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)],
    };
    if r > 0.0 {
        let i0 = 0;
        let g0 = init[1];
        init[0] = invert_excess(c, s, r, (gamma[i0] - g0).max(0.0), tau[i0]);
    }
    // a density above 1 has no meaning; large-r refits end on this bound
    init[0] = init[0].min(1.0);
    let cfg = FitConfig::default().with_bounds(vec![(0.0, 1.0), (0.0, f64::INFINITY)]);
    let obs = Observations::new(&tau, &gamma, &sigma);
    let mut result = nlls_fit(&model, &obs, &init, &cfg)?;
    if !result.converged && r > 0.0 {
        // strong recombination leaves a large-residual valley in which
        // Gauss–Newton only creeps; restart from the profiled minimum
        let (x, g0) = profile_recovery(&model, &obs, init[1]);
        let second = nlls_fit(&model, &obs, &[x, g0], &cfg)?;
        if second.converged || second.chi2 < result.chi2 {
            result = second;
        }
    }
    Ok(RecoveryFit {
        x_in: result.params[0],
        x_in_err: result.stderr[0],
        gamma0: result.params[1],
        gamma0_err: result.stderr[1],
        result,
    })
}

/// Fit the recovery with the trapping rate free as well (parameters `[x_in, Γ₀, s]`).
pub fn fit_trapping(dev: &DeviceParams, points: &[RatePoint], r: f64) -> Result<TrappingFit> {
    if points.len() < 4 {
        return Err(FitError::InsufficientData { have: points.len(), need: 4 });
    }
    if !(r >= 0.0) {
        return Err(FitError::InvalidInput("r must be non-negative".into()));
    }
    let c = qp_coupling(dev);
    let (tau, gamma, sigma) = rate_columns(points);
    let span = tau[tau.len() - 1] - tau[0];
    if !(span > 0.0) {
        return Err(FitError::Degenerate("delays have no extent".into()));
    }
    let t_ref = tau[0];
    let mut best = (f64::INFINITY, Vec::new());
    for s in log_grid(0.1 / span, 50.0 / span, 60) {
        let u: Vec<f64> = tau.iter().map(|t| c * (-s * t).exp()).collect();
        if let Some((coef, chi2)) = affine_lsq(&u, &gamma, &sigma) {
            if chi2 < best.0 && coef[0] >= 0.0 {
                best = (chi2, vec![coef[0], coef[1].max(0.0), s]);
            }
        }
    }
    if best.1.is_empty() {
        return Err(FitError::Initialization("no trapping rate reproduces a decaying series".into()));
    }
    if r > 0.0 {
        let (g0, s) = (best.1[1], best.1[2]);
        best.1[0] = invert_excess(c, s, r, c * best.1[0] * (-s * t_ref).exp(), t_ref);
        best.1[1] = g0;
    }
    let cfg = FitConfig::default().with_bounds(vec![(0.0, f64::INFINITY), (0.0, f64::INFINITY), (0.0, f64::INFINITY)]);
    let model = TrappingModel { coupling: c, r };
    let result = nlls_fit(&model, &Observations::new(&tau, &gamma, &sigma), &best.1, &cfg)?;
    Ok(TrappingFit {
        s: result.params[2],
        s_err: result.stderr[2],
        x_in: result.params[0],
        gamma0: result.params[1],
        result,
    })
}

/// Closed-form weighted straight-line fit `y = slope·x + intercept`.
///
/// Standard errors follow the same rule as [`nlls_fit`]: scaled by `√(χ²/dof)`
/// when the reduced χ² exceeds one.
pub fn fit_linear_weighted(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if y.len() != n || sigma.len() != n {
        return Err(FitError::InvalidInput("x, y and sigma lengths differ".into()));
    }
    if n < 2 {
        return Err(FitError::InsufficientData { have: n, need: 2 });
    }
    if x.iter().chain(y).chain(sigma).any(|v| !v.is_finite()) || sigma.iter().any(|s| *s <= 0.0) {
        return Err(FitError::InvalidInput("non-finite value or non-positive sigma".into()));
    }
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let xscale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(sxx > 1e-24 * sw * xscale * xscale) || xscale == 0.0 {
        return Err(FitError::Degenerate("all abscissae are identical".into()));
    }
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = x.iter().zip(y).zip(&w).map(|((x, y), w)| w * (y - slope * x - intercept).powi(2)).sum();
    let dof = n - 2;
    let var_slope = 1.0 / sxx;
    let var_icpt = 1.0 / sw + xm * xm / sxx;
    let cov_si = -xm / sxx;
    let scale = if dof > 0 && chi2 / dof as f64 > 1.0 { chi2 / dof as f64 } else { 1.0 };
    let covariance = vec![vec![var_slope * scale, cov_si * scale], vec![cov_si * scale, var_icpt * scale]];
    let stderr = vec![(var_slope * scale).sqrt(), (var_icpt * scale).sqrt()];
    Ok(LinearFit {
        slope,
        slope_err: stderr[0],
        intercept,
        intercept_err: stderr[1],
        result: FitResult {
            params: vec![slope, intercept],
            stderr,
            covariance,
            chi2,
            dof,
            converged: true,
            n_iter: 0,
            chi2_history: vec![chi2],
        },
    })
}
