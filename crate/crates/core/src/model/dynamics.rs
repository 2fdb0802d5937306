//! Closed-form solution of `dx/dt = -r·x² - s·x + g` and the decay rate it implies.
//!
//! With `k = s + 2r·x0` the excess density over the steady state is
//!
//! ```text
//! x(t) - x0 = x_in·k / ((k + r·x_in)·e^{kt} - r·x_in)
//!           = x_in / (e^{kt} + r·x_in·(e^{kt} - 1)/k)
//! ```
//!
//! The second form stays finite for `k → 0` (pure recombination) and reduces to
//! `x_in·e^{-st}` exactly when `r = 0`.

use super::{qp_coupling, DeviceParams, ModelError, QpDynamics, Result};

/// Exponent beyond which the excess density is below 1e-300 and is dropped.
pub const EXP_OVERFLOW_ARG: f64 = 700.0;

/// `(e^{kt} - 1)/k` and its derivative in `k`, continuous through `k = 0`.
fn phi_and_dk(k: f64, t: f64) -> (f64, f64) {
    let z = k * t;
    if z.abs() < 1e-5 {
        let phi = t * (1.0 + z / 2.0 + z * z / 6.0);
        let dphi = t * t * (0.5 + z / 3.0 + z * z / 8.0);
        (phi, dphi)
    } else {
        let phi = z.exp_m1() / k;
        let dphi = (t * z.exp() - phi) / k;
        (phi, dphi)
    }
}

fn excess(k: f64, r: f64, x_in: f64, t: f64) -> f64 {
    if x_in == 0.0 {
        return 0.0;
    }
    let z = k * t;
    if z > EXP_OVERFLOW_ARG {
        return 0.0;
    }
    let (phi, _) = phi_and_dk(k, t);
    x_in / (z.exp() + r * x_in * phi)
}

/// Density at a single time.
pub fn xqp_at(dyn_: &QpDynamics, t: f64) -> f64 {
    dyn_.x0 + excess(dyn_.linear_rate(), dyn_.r, dyn_.x_in, t)
}

fn check_grid(t: &[f64]) -> Result<()> {
    if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ModelError::Domain("times must be finite and non-negative".into()));
    }
    if t.windows(2).any(|w| w[1] < w[0]) {
        return Err(ModelError::Domain("time grid must be sorted".into()));
    }
    Ok(())
}

/// Density series on a sorted, non-negative time grid.
pub fn xqp_trajectory(dyn_: &QpDynamics, t: &[f64]) -> Result<Vec<f64>> {
    dyn_.validate()?;
    check_grid(t)?;
    Ok(t.iter().map(|&ti| xqp_at(dyn_, ti)).collect())
}

/// Decay rate after injection, `Γ(t) = C·(x(t) - x0) + Γ₀`.
///
/// When `dyn_.x0 = Γ₀/C` (no external loss) this is the recovery model with
/// only `x_in`, `Γ₀`, `s` and `r` as parameters; see [`recovery_rate`].
pub fn gamma_recovery(dev: &DeviceParams, dyn_: &QpDynamics, t: &[f64]) -> Result<Vec<f64>> {
    dev.validate()?;
    dyn_.validate()?;
    check_grid(t)?;
    let c = qp_coupling(dev);
    let k = dyn_.linear_rate();
    Ok(t.iter().map(|&ti| c * excess(k, dyn_.r, dyn_.x_in, ti) + dev.gamma0).collect())
}

/// Recovery-model decay rate together with its parameter derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryPoint {
    pub gamma: f64,
    pub d_x_in: f64,
    pub d_gamma0: f64,
    pub d_s: f64,
}

/// Decay rate with the background density tied to the baseline, `x0 = Γ₀/C`.
pub fn recovery_rate(c: f64, gamma0: f64, s: f64, r: f64, x_in: f64, t: f64) -> f64 {
    recovery_point(c, gamma0, s, r, x_in, t).gamma
}

pub(crate) fn recovery_point(c: f64, gamma0: f64, s: f64, r: f64, x_in: f64, t: f64) -> RecoveryPoint {
    let dk_dgamma0 = 2.0 * r / c;
    let k = s + gamma0 * dk_dgamma0;
    let z = k * t;
    if z > EXP_OVERFLOW_ARG {
        return RecoveryPoint { gamma: gamma0, d_x_in: 0.0, d_gamma0: 1.0, d_s: 0.0 };
    }
    let e = z.exp();
    let (phi, dphi) = phi_and_dk(k, t);
    let denom = e + r * x_in * phi;
    let amp = c * x_in / denom;
    let d_x_in = (c / denom) * (e / denom);
    let d_k = -amp * (t * e + r * x_in * dphi) / denom;
    RecoveryPoint { gamma: amp + gamma0, d_x_in, d_gamma0: 1.0 + d_k * dk_dgamma0, d_s: d_k }
}
