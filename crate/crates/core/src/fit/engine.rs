//! Weighted Levenberg-Marquardt with box bounds.
//!
//! Minimizes `χ² = Σ ((y_i − f(x_i; p)) / σ_i)²`. The damped normal equations are
//! solved in the column-scaled basis `D⁻¹ JᵀJ D⁻¹` with `D = √diag(JᵀJ)`, which
//! makes the damping a Marquardt (diagonal) one and keeps parameters of very
//! different magnitude well conditioned.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FitError, Result};

/// A scalar model `y = f(x; p)`.
pub trait Model: Sync {
    fn n_params(&self) -> usize;

    fn eval(&self, x: f64, p: &[f64]) -> f64;

    /// Partial derivatives with respect to `p`. Defaults to central differences.
    fn gradient(&self, x: f64, p: &[f64], grad: &mut [f64]) {
        central_difference_gradient(self, x, p, grad);
    }
}

/// Central-difference gradient with a relative step of `ε^{1/3}`.
pub fn central_difference_gradient<M: Model + ?Sized>(model: &M, x: f64, p: &[f64], grad: &mut [f64]) {
    let mut q = p.to_vec();
    for j in 0..p.len() {
        let h = 6e-6 * p[j].abs().max(1e-8);
        q[j] = p[j] + h;
        let up = model.eval(x, &q);
        q[j] = p[j] - h;
        let down = model.eval(x, &q);
        q[j] = p[j];
        grad[j] = (up - down) / (2.0 * h);
    }
}

/// Abscissae, ordinates and per-point standard deviations.
#[derive(Debug, Clone, Copy)]
pub struct Observations<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub sigma: &'a [f64],
}

impl<'a> Observations<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], sigma: &'a [f64]) -> Self {
        Self { x, y, sigma }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn validate(&self, n_params: usize) -> Result<()> {
        if self.y.len() != self.x.len() || self.sigma.len() != self.x.len() {
            return Err(FitError::InvalidInput("x, y and sigma lengths differ".into()));
        }
        if self.len() < n_params + 1 {
            return Err(FitError::InsufficientData { have: self.len(), need: n_params + 1 });
        }
        let finite = self.x.iter().chain(self.y).chain(self.sigma).all(|v| v.is_finite());
        if !finite {
            return Err(FitError::InvalidInput("non-finite observation".into()));
        }
        if self.sigma.iter().any(|s| *s <= 0.0) {
            return Err(FitError::InvalidInput("sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Largest tolerated cosine between the residual and any Jacobian column.
    pub gtol: f64,
    /// Relative step below which iteration stops as converged.
    pub xtol: f64,
    /// Relative χ² reduction (actual and predicted) below which iteration
    /// stops as converged.
    pub ftol: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Per-parameter `(lower, upper)`; empty means unbounded.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-10,
            xtol: 1e-12,
            ftol: 1e-12,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            bounds: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = bounds;
        self
    }

    fn validate(&self, n_params: usize) -> Result<()> {
        let tol_ok = self.gtol > 0.0
            && self.xtol > 0.0
            && self.ftol > 0.0
            && self.damping_init > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 1.0;
        if !tol_ok || self.max_iter == 0 {
            return Err(FitError::InvalidInput("tolerances and damping factors must be positive".into()));
        }
        if !self.bounds.is_empty() {
            if self.bounds.len() != n_params {
                return Err(FitError::InvalidInput(format!(
                    "{} bounds for {} parameters",
                    self.bounds.len(),
                    n_params
                )));
            }
            if self.bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(FitError::InvalidInput("lower bound above upper bound".into()));
            }
        }
        Ok(())
    }

    fn clamp(&self, p: &mut [f64]) {
        for (v, (lo, hi)) in p.iter_mut().zip(&self.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub n_iter: usize,
    /// χ² at the start and after every accepted step.
    pub chi2_history: Vec<f64>,
}

impl FitResult {
    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            0.0
        } else {
            self.chi2 / self.dof as f64
        }
    }
}

struct Linearization {
    jac: DMatrix<f64>,
    resid: DVector<f64>,
}

fn residuals<M: Model + ?Sized>(model: &M, obs: &Observations, p: &[f64]) -> Vec<f64> {
    obs.x.iter().zip(obs.y).zip(obs.sigma).map(|((x, y), s)| (y - model.eval(*x, p)) / s).collect()
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// `Σ old² − Σ new²`, computed without cancellation.
fn reduction(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(a, b)| (a - b) * (a + b)).sum()
}

fn linearize<M: Model + ?Sized>(model: &M, obs: &Observations, p: &[f64]) -> Linearization {
    let n = obs.len();
    let m = p.len();
    let mut jac = DMatrix::zeros(n, m);
    let mut resid = DVector::zeros(n);
    let mut grad = vec![0.0; m];
    for i in 0..n {
        let inv_s = 1.0 / obs.sigma[i];
        resid[i] = (obs.y[i] - model.eval(obs.x[i], p)) * inv_s;
        model.gradient(obs.x[i], p, &mut grad);
        for j in 0..m {
            jac[(i, j)] = grad[j] * inv_s;
        }
    }
    Linearization { jac, resid }
}

/// Largest cosine between the residual and a Jacobian column, skipping columns
/// whose parameter sits on a bound with the descent direction pointing outside.
fn gradient_measure(lin: &Linearization, p: &[f64], bounds: &[(f64, f64)]) -> f64 {
    let rnorm = lin.resid.norm();
    if rnorm == 0.0 {
        return 0.0;
    }
    let g = lin.jac.transpose() * &lin.resid;
    let mut worst: f64 = 0.0;
    for j in 0..p.len() {
        if at_active_bound(p[j], g[j], bounds.get(j)) {
            continue;
        }
        let cnorm = lin.jac.column(j).norm();
        if cnorm == 0.0 {
            continue;
        }
        worst = worst.max(g[j].abs() / (cnorm * rnorm));
    }
    worst
}

/// `g` is the descent direction component (positive asks `p` to increase).
fn at_active_bound(p: f64, g: f64, bound: Option<&(f64, f64)>) -> bool {
    match bound {
        Some((lo, hi)) => (p <= *lo && g < 0.0) || (p >= *hi && g > 0.0),
        None => false,
    }
}

fn column_scales(normal: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        normal.nrows(),
        (0..normal.nrows()).map(|j| {
            let d = normal[(j, j)].sqrt();
            if d > 0.0 && d.is_finite() {
                d
            } else {
                1.0
            }
        }),
    )
}

fn covariance(normal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = normal.nrows();
    if (0..m).any(|j| !(normal[(j, j)] > 0.0) || !normal[(j, j)].is_finite()) {
        return Err(FitError::RankDeficient);
    }
    let d = column_scales(normal);
    let mut scaled = normal.clone();
    for i in 0..m {
        for j in 0..m {
            scaled[(i, j)] /= d[i] * d[j];
        }
    }
    let eig = scaled.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_ev > 1e-14 * max_ev) {
        return Err(FitError::RankDeficient);
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let mut cov = inv;
    for i in 0..m {
        for j in 0..m {
            cov[(i, j)] /= d[i] * d[j];
        }
    }
    // symmetrize against round-off
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(cov)
}

/// Each residual `(y − f)/σ` carries a rounding error of order ε·|y/σ|, so χ²
/// changes below this are not resolvable.
fn rounding_floor(obs: &Observations, resid: &[f64]) -> f64 {
    16.0 * f64::EPSILON
        * obs.y.iter().zip(obs.sigma).zip(resid).map(|((y, s), r)| r.abs() * ((y / s).abs() + r.abs())).sum::<f64>()
}

/// Undamped Gauss–Newton steps from a converged point.
///
/// The stopping tests above are loose in parameter space (a relative χ²
/// change of `ftol` still allows offsets of order `√ftol` standard errors), so
/// the minimum is refined until a step drops below `xtol`, stops shrinking,
/// or makes χ² worse by more than rounding. Near the minimum this converges quadratically, which makes the
/// result exact on linear problems and independent of the data order.
fn polish<M: Model + ?Sized>(
    model: &M,
    obs: &Observations,
    cfg: &FitConfig,
    p: &mut Vec<f64>,
    resid: &mut Vec<f64>,
    chi2: &mut f64,
    history: &mut Vec<f64>,
) {
    let m = p.len();
    let mut last_size = f64::INFINITY;
    for _ in 0..20 {
        let lin = linearize(model, obs, p);
        let normal = lin.jac.transpose() * &lin.jac;
        let grad = lin.jac.transpose() * &lin.resid;
        let d = column_scales(&normal);
        let mut scaled = normal.clone();
        for i in 0..m {
            for j in 0..m {
                scaled[(i, j)] /= d[i] * d[j];
            }
        }
        let mut scaled_grad = grad.component_div(&d);
        for j in 0..m {
            if at_active_bound(p[j], grad[j], cfg.bounds.get(j)) {
                for k in 0..m {
                    scaled[(j, k)] = 0.0;
                    scaled[(k, j)] = 0.0;
                }
                scaled[(j, j)] = 1.0;
                scaled_grad[j] = 0.0;
            }
        }
        let Some(ch) = scaled.cholesky() else { return };
        let scaled_step = ch.solve(&scaled_grad);
        // Gauss–Newton steps shrink fast near a minimum; once they stop doing
        // so, what is left is rounding
        let size = scaled_step.norm();
        if size > 0.5 * last_size {
            return;
        }
        last_size = size;
        let step = scaled_step.component_div(&d);
        let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        cfg.clamp(&mut trial);
        let trial_resid = residuals(model, obs, &trial);
        let trial_chi2 = sum_sq(&trial_resid);
        let floor = rounding_floor(obs, resid);
        let gain = reduction(resid, &trial_resid);
        if !(trial_chi2.is_finite() && gain > -floor) {
            return;
        }
        let small = trial.iter().zip(p.iter()).all(|(a, b)| (a - b).abs() <= cfg.xtol * (b.abs() + cfg.xtol));
        *p = trial;
        *chi2 = trial_chi2.min(*chi2);
        *resid = trial_resid;
        history.push(*chi2);
        if small {
            return;
        }
    }
}

/// Damped least squares from `init`.
///
/// Accepted damped steps strictly decrease χ²; a converged fit is then refined
/// by Gauss–Newton polishing, whose steps may only change χ² within rounding (the history
/// records the running minimum, so it stays non-increasing). `converged` is set when the
/// bound-projected gradient measure falls below `cfg.gtol`, or an accepted step
/// is below `cfg.xtol` or reduces χ² (actually and as predicted by the linear
/// model) by less than `cfg.ftol` relative, or when the damping blows up at
/// a point where even the undamped step predicts less than that; any other
/// damping blow-up or the
/// iteration limit leaves it false. Standard errors
/// are scaled by `√(χ²/dof)` when the reduced χ² exceeds one.
pub fn nlls_fit<M: Model + ?Sized>(model: &M, obs: &Observations, init: &[f64], cfg: &FitConfig) -> Result<FitResult> {
    let m = model.n_params();
    if init.len() != m {
        return Err(FitError::InvalidInput(format!("{} initial values for {} parameters", init.len(), m)));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput("non-finite initial value".into()));
    }
    obs.validate(m)?;
    cfg.validate(m)?;

    let mut p = init.to_vec();
    cfg.clamp(&mut p);
    let mut resid = residuals(model, obs, &p);
    let mut chi2 = sum_sq(&resid);
    if !chi2.is_finite() {
        return Err(FitError::InvalidInput("model is not finite at the initial point".into()));
    }
    let data_norm2: f64 = obs.y.iter().zip(obs.sigma).map(|(y, s)| (y / s).powi(2)).sum();
    let mut history = vec![chi2];
    let mut lambda = cfg.damping_init;
    let mut n_iter = 0;
    let mut stalled_at_minimum = false;

    'outer: while n_iter < cfg.max_iter {
        n_iter += 1;
        let lin = linearize(model, obs, &p);
        if chi2 <= 1e-24 * data_norm2 || gradient_measure(&lin, &p, &cfg.bounds) <= cfg.gtol {
            break;
        }
        let normal = lin.jac.transpose() * &lin.jac;
        let grad = lin.jac.transpose() * &lin.resid;
        let d = column_scales(&normal);
        let mut scaled = normal.clone();
        for i in 0..m {
            for j in 0..m {
                scaled[(i, j)] /= d[i] * d[j];
            }
        }
        let mut scaled_grad = grad.component_div(&d);
        // parameters pinned at a bound by the descent direction stay put
        for j in 0..m {
            if at_active_bound(p[j], grad[j], cfg.bounds.get(j)) {
                for k in 0..m {
                    scaled[(j, k)] = 0.0;
                    scaled[(k, j)] = 0.0;
                }
                scaled[(j, j)] = 1.0;
                scaled_grad[j] = 0.0;
            }
        }

        // no step reduces χ² any more; that is a minimum if even the undamped
        // step has nothing resolvable left to gain
        let floor = (cfg.ftol * chi2).max(rounding_floor(obs, &resid));
        let at_floor = |scaled: &DMatrix<f64>, g: &DVector<f64>| {
            scaled.clone().cholesky().is_some_and(|ch| g.dot(&ch.solve(g)) <= floor)
        };

        loop {
            let mut damped = scaled.clone();
            for j in 0..m {
                damped[(j, j)] += lambda;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&scaled_grad).component_div(&d),
                None => {
                    lambda *= cfg.damping_up;
                    if lambda > 1e16 {
                        stalled_at_minimum = at_floor(&scaled, &scaled_grad);
                        break 'outer;
                    }
                    continue;
                }
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            cfg.clamp(&mut trial);
            let trial_resid = residuals(model, obs, &trial);
            let trial_chi2 = sum_sq(&trial_resid);
            // the cancellation-free reduction still sees progress once χ² itself
            // only changes in its last digit; the recorded value is capped so the
            // history stays monotone through that round-off
            let actual = reduction(&resid, &trial_resid);
            if trial_chi2.is_finite() && actual > 0.0 {
                let small = trial.iter().zip(&p).all(|(a, b)| (a - b).abs() <= cfg.xtol * (b.abs() + cfg.xtol));
                let dp = DVector::from_iterator(m, trial.iter().zip(&p).map(|(a, b)| a - b));
                let jd = &lin.jac * dp;
                let pred: f64 = jd.iter().zip(lin.resid.iter()).map(|(j, r)| j * (2.0 * r - j)).sum();
                let flat = actual <= cfg.ftol * chi2 && pred <= cfg.ftol * chi2;
                p = trial;
                chi2 = trial_chi2.min(chi2);
                resid = trial_resid;
                history.push(chi2);
                lambda = (lambda / cfg.damping_down).max(1e-15);
                if small || flat {
                    stalled_at_minimum = true;
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.damping_up;
            if lambda > 1e16 {
                stalled_at_minimum = at_floor(&scaled, &scaled_grad);
                break 'outer;
            }
        }
    }

    let lin = linearize(model, obs, &p);
    // a residual at round-off level has no meaningful direction
    let converged =
        stalled_at_minimum || chi2 <= 1e-24 * data_norm2 || gradient_measure(&lin, &p, &cfg.bounds) <= cfg.gtol;
    let lin = if converged && chi2 > 1e-24 * data_norm2 {
        polish(model, obs, cfg, &mut p, &mut resid, &mut chi2, &mut history);
        linearize(model, obs, &p)
    } else {
        lin
    };
    let normal = lin.jac.transpose() * &lin.jac;
    let mut cov = covariance(&normal)?;
    let dof = obs.len() - m;
    let red = chi2 / dof as f64;
    if red > 1.0 {
        cov *= red;
    }
    let stderr = (0..m).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let covariance = (0..m).map(|i| (0..m).map(|j| cov[(i, j)]).collect()).collect();
    Ok(FitResult { params: p, stderr, covariance, chi2, dof, converged, n_iter, chi2_history: history })
}
