//! Forward physics of quasiparticle-limited qubit relaxation.
//!
//! Everything here is a pure function of its arguments. Rates are in s⁻¹
//! (angular where the name says so), frequencies in Hz, powers in W and
//! densities are normalized to the Cooper-pair density.

mod dynamics;
mod thermal;

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use dynamics::recovery_point;
pub use dynamics::{gamma_recovery, recovery_rate, xqp_at, xqp_trajectory, RecoveryPoint, EXP_OVERFLOW_ARG};
pub use thermal::{excited_population, thermal_xqp, thermometry};

/// Planck constant, J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Reactive/dissipative ratio used for the quasiparticle frequency pull.
///
/// Provisional: `δω = -(√π/2)·C·x_qp`. Callers scale it with `slope_scale`.
pub const FREQ_SHIFT_PREFACTOR: f64 = 0.886_226_925_452_758; // √π / 2

/// Slack on `T₂* ≤ 2T₁` before a decomposition is declared infeasible.
pub const DEPHASING_SLACK: f64 = 1e-9;

/// Default quasiparticle diffusion constant in aluminium films, m²/s.
pub const DEFAULT_DIFFUSION_CONST: f64 = 1.8e-3;

/// Offset of position C below position B, m.
pub const POSITION_C_OFFSET: f64 = 200e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("value outside the domain: {0}")]
    Domain(String),
    #[error("T2* = {t2_star:e} s exceeds 2·T1 = {:e} s; no non-negative dephasing rate", 2.0 * .t1)]
    InfeasibleDecomposition { t1: f64, t2_star: f64 },
    #[error("excited population {0} is not below 1/2; no finite temperature")]
    NonThermal(f64),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Static qubit and film properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Qubit transition frequency, Hz.
    pub f_q: f64,
    /// Gap frequency, `Δ = h·f_gap`, Hz.
    pub f_gap: f64,
    /// Decay rate without injected quasiparticles, s⁻¹.
    pub gamma0: f64,
    /// Decay rate from non-quasiparticle channels, s⁻¹.
    pub gamma_ext: f64,
}

impl DeviceParams {
    pub fn new(f_q: f64, f_gap: f64, gamma0: f64, gamma_ext: f64) -> Result<Self> {
        let dev = Self { f_q, f_gap, gamma0, gamma_ext };
        dev.validate()?;
        Ok(dev)
    }

    /// Device of the measured transmon: 6.30 GHz qubit on aluminium (Δ = h·46.9 GHz),
    /// `T₁ = 10 µs` and all baseline loss attributed to quasiparticles.
    pub fn reference() -> Self {
        Self { f_q: 6.30e9, f_gap: 46.9e9, gamma0: 1e5, gamma_ext: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.f_q, self.f_gap, self.gamma0, self.gamma_ext].iter().all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::InvalidParams("device parameters must be finite".into()));
        }
        if self.f_q <= 0.0 || self.f_gap <= 0.0 {
            return Err(ModelError::InvalidParams("f_q and f_gap must be positive".into()));
        }
        if self.f_q >= 2.0 * self.f_gap {
            return Err(ModelError::InvalidParams(format!(
                "qubit at {:e} Hz is above the pair-breaking threshold 2·f_gap = {:e} Hz",
                self.f_q,
                2.0 * self.f_gap
            )));
        }
        if self.gamma_ext < 0.0 || self.gamma0 < self.gamma_ext {
            return Err(ModelError::InvalidParams("require gamma0 >= gamma_ext >= 0".into()));
        }
        Ok(())
    }

    pub fn omega_q(&self) -> f64 {
        2.0 * PI * self.f_q
    }

    /// Gap energy Δ, J.
    pub fn gap_energy(&self) -> f64 {
        PLANCK * self.f_gap
    }

    /// Background density implied by the baseline rate, `(Γ₀ − Γ_ext)/C`.
    pub fn background_xqp(&self) -> f64 {
        (self.gamma0 - self.gamma_ext) / qp_coupling(self)
    }

    pub fn with_gamma0(mut self, gamma0: f64) -> Self {
        self.gamma0 = gamma0;
        self
    }
}

/// Trapping/recombination state of the quasiparticle population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpDynamics {
    /// Trapping rate, s⁻¹.
    pub s: f64,
    /// Recombination coefficient of the `x²` term, s⁻¹.
    pub r: f64,
    /// Background generation rate, s⁻¹.
    pub g: f64,
    /// Steady-state density.
    pub x0: f64,
    /// Injected density at zero delay.
    pub x_in: f64,
}

impl QpDynamics {
    /// Build from the steady state; `g` follows from stationarity.
    pub fn from_steady_state(s: f64, r: f64, x0: f64, x_in: f64) -> Result<Self> {
        let dyn_ = Self { s, r, g: s * x0 + r * x0 * x0, x0, x_in };
        dyn_.validate()?;
        Ok(dyn_)
    }

    /// Build from the generation rate; `x0` is the positive root of `r·x² + s·x = g`.
    pub fn from_generation(s: f64, r: f64, g: f64, x_in: f64) -> Result<Self> {
        if !(s >= 0.0 && r >= 0.0 && g >= 0.0) {
            return Err(ModelError::InvalidParams("s, r and g must be non-negative".into()));
        }
        let disc = (s * s + 4.0 * r * g).sqrt();
        let x0 = if g == 0.0 {
            0.0
        } else if s + disc > 0.0 {
            2.0 * g / (s + disc)
        } else {
            return Err(ModelError::InvalidParams(
                "positive generation without any loss channel has no steady state".into(),
            ));
        };
        let dyn_ = Self { s, r, g, x0, x_in };
        dyn_.validate()?;
        Ok(dyn_)
    }

    /// Trapping-only recovery on top of the background implied by `dev`.
    pub fn trapping_only(dev: &DeviceParams, s: f64, x_in: f64) -> Result<Self> {
        Self::from_steady_state(s, 0.0, dev.background_xqp(), x_in)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.s, self.r, self.g, self.x0, self.x_in];
        if !vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(ModelError::InvalidParams("s, r, g, x0 and x_in must be finite and non-negative".into()));
        }
        let g_ss = self.s * self.x0 + self.r * self.x0 * self.x0;
        let scale = self.g.abs().max(g_ss.abs()).max(f64::MIN_POSITIVE);
        if (self.g - g_ss).abs() > 1e-9 * scale {
            return Err(ModelError::InvalidParams(format!(
                "generation rate {:e} inconsistent with steady state (s·x0 + r·x0² = {:e})",
                self.g, g_ss
            )));
        }
        Ok(())
    }

    /// Effective linear relaxation rate around the steady state, `s + 2r·x0`.
    pub fn linear_rate(&self) -> f64 {
        self.s + 2.0 * self.r * self.x0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    /// On the metal pad.
    A,
    /// On the lower pad edge.
    B,
    /// On the substrate below the qubit.
    C,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::A, Position::B, Position::C];
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Position::A => "A",
            Position::B => "B",
            Position::C => "C",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Position {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Position::A),
            "B" | "b" => Ok(Position::B),
            "C" | "c" => Ok(Position::C),
            other => Err(ModelError::InvalidParams(format!("unknown beam position '{other}'"))),
        }
    }
}

/// Optical drive at one beam position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalDrive {
    pub position: Position,
    /// Optical power, W.
    pub power: f64,
    /// Pulse length, s (zero for CW).
    pub pulse_len: f64,
    /// Conversion constant, density per W.
    pub mu: f64,
    /// Frequency-pull coefficient λ, rad·s⁻¹·W⁻¹.
    pub lambda_shift: f64,
}

impl OpticalDrive {
    pub fn cw(position: Position, power: f64, mu: f64) -> Self {
        Self { position, power, pulse_len: 0.0, mu, lambda_shift: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power >= 0.0 && self.pulse_len >= 0.0 && self.mu >= 0.0) {
            return Err(ModelError::InvalidParams("power, pulse_len and mu must be non-negative".into()));
        }
        Ok(())
    }

    /// Pulse energy, J.
    pub fn energy(&self) -> f64 {
        self.power * self.pulse_len
    }

    /// Steady injected density under CW illumination.
    pub fn cw_xqp(&self) -> f64 {
        self.mu * self.power
    }
}

/// `T₁`, `T₂*` and the pure-dephasing time. `t_phi = None` means `T₂* = 2T₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSet {
    pub t1: f64,
    pub t2_star: f64,
    pub t_phi: Option<f64>,
}

impl CoherenceSet {
    /// Compose `1/T₂* = 1/T_φ + 1/(2T₁)`.
    pub fn compose(t1: f64, t_phi: Option<f64>) -> Result<Self> {
        if !(t1 > 0.0) || t_phi.is_some_and(|t| !(t > 0.0)) {
            return Err(ModelError::Domain("coherence times must be positive".into()));
        }
        let rate = 0.5 / t1 + t_phi.map_or(0.0, |t| 1.0 / t);
        Ok(Self { t1, t2_star: 1.0 / rate, t_phi })
    }
}

/// Quasiparticle coupling `C = √(2ω_qΔ/π²ħ) = √(8·f_q·f_Δ)`, s⁻¹ per unit density.
pub fn qp_coupling(dev: &DeviceParams) -> f64 {
    (8.0 * dev.f_q * dev.f_gap).sqrt()
}

/// `Γ = C·x + Γ₀` for an injected density `x` above the background.
pub fn decay_rate(dev: &DeviceParams, x_qp: f64) -> Result<f64> {
    if !(x_qp >= 0.0) {
        return Err(ModelError::Domain(format!("density must be non-negative, got {x_qp}")));
    }
    Ok(qp_coupling(dev) * x_qp + dev.gamma0)
}

/// CW decay rate `Γ = C·μ·P + Γ₀`.
pub fn cw_gamma(dev: &DeviceParams, drive: &OpticalDrive) -> Result<f64> {
    drive.validate()?;
    decay_rate(dev, drive.cw_xqp())
}

/// Quasiparticle pull on the qubit angular frequency, rad/s (negative).
pub fn freq_shift(dev: &DeviceParams, x_qp: f64, slope_scale: f64) -> Result<f64> {
    if !(x_qp >= 0.0) {
        return Err(ModelError::Domain(format!("density must be non-negative, got {x_qp}")));
    }
    if !(slope_scale > 0.0) {
        return Err(ModelError::Domain("slope_scale must be positive".into()));
    }
    Ok(-slope_scale * FREQ_SHIFT_PREFACTOR * qp_coupling(dev) * x_qp)
}

/// Theory slope of the frequency pull against injected density, rad/s per unit density.
pub fn freq_shift_slope(dev: &DeviceParams) -> f64 {
    -FREQ_SHIFT_PREFACTOR * qp_coupling(dev)
}

/// Split `T₂*` into the relaxation and pure-dephasing contributions.
pub fn dephasing_decompose(t1: f64, t2_star: f64) -> Result<CoherenceSet> {
    if !(t1 > 0.0 && t2_star > 0.0) || !t1.is_finite() || !t2_star.is_finite() {
        return Err(ModelError::Domain("T1 and T2* must be positive and finite".into()));
    }
    let limit = 2.0 * t1;
    if t2_star > limit * (1.0 + DEPHASING_SLACK) {
        return Err(ModelError::InfeasibleDecomposition { t1, t2_star });
    }
    let rate = 1.0 / t2_star - 0.5 / t1;
    let t_phi = if t2_star >= limit || rate <= 0.0 { None } else { Some(1.0 / rate) };
    Ok(CoherenceSet { t1, t2_star, t_phi })
}

/// Gap frequency reduced by the quasiparticle population, `f_Δ·(1 − x)`.
pub fn gap_suppression(dev: &DeviceParams, x_qp: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&x_qp) {
        return Err(ModelError::Domain(format!("density must lie in [0, 1), got {x_qp}")));
    }
    Ok(dev.f_gap * (1.0 - x_qp))
}

/// Diffusion time `L²/D` across a pad of length `pad_len`.
pub fn diffusion_time(pad_len: f64, diff_const: f64) -> Result<f64> {
    if !(pad_len > 0.0 && diff_const > 0.0) {
        return Err(ModelError::Domain("pad length and diffusion constant must be positive".into()));
    }
    Ok(pad_len * pad_len / diff_const)
}

/// Diffusion is negligible when it is faster than trapping, `t_diff < 1/s`.
pub fn diffusion_negligible(t_diff: f64, s: f64) -> bool {
    t_diff * s < 1.0
}
