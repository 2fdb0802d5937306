//! Generators for the individual measurement protocols.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian, task_rng, CwDataset, CwNoise, CwPoint, MeasurementTrace, NoiseModel, Protocol};
use super::{RecoveryEntry, RecoverySeries, Result, SweepKind, SynthError};
use crate::model::{
    cw_gamma, decay_rate, excited_population, freq_shift, gamma_recovery, CoherenceSet, DeviceParams, OpticalDrive,
    QpDynamics,
};

/// Reference pulse length of the energy mapping, s.
pub const DEFAULT_TAU_REF: f64 = 10e-6;

/// Map from pulse energy to injected density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InjectionMap {
    /// `x_in = μ·P·τ_pulse / τ_ref`: a pulse of length `τ_ref` injects the
    /// density that CW illumination at the same power would sustain.
    Linear { tau_ref: f64 },
    /// Phenomenological linear–plateau–linear shape. Below `knee_x` it follows
    /// the linear map; it then stays at `knee_x` until the linear map reaches
    /// `knee_x·plateau_factor`, and afterwards rises again with slope
    /// `resume_slope` relative to the linear map. Only for producing
    /// saturation-like test data; no physics is implied.
    Piecewise { tau_ref: f64, knee_x: f64, plateau_factor: f64, resume_slope: f64 },
}

impl Default for InjectionMap {
    fn default() -> Self {
        InjectionMap::Linear { tau_ref: DEFAULT_TAU_REF }
    }
}

impl InjectionMap {
    pub fn x_in(&self, drive: &OpticalDrive) -> Result<f64> {
        drive.validate()?;
        match *self {
            InjectionMap::Linear { tau_ref } => {
                check_tau_ref(tau_ref)?;
                Ok(drive.mu * drive.energy() / tau_ref)
            }
            InjectionMap::Piecewise { tau_ref, knee_x, plateau_factor, resume_slope } => {
                check_tau_ref(tau_ref)?;
                if !(knee_x > 0.0 && plateau_factor >= 1.0 && resume_slope >= 0.0) {
                    return Err(SynthError::Invalid(
                        "piecewise map needs knee_x > 0, plateau_factor ≥ 1, resume_slope ≥ 0".into(),
                    ));
                }
                let lin = drive.mu * drive.energy() / tau_ref;
                let end = knee_x * plateau_factor;
                Ok(if lin <= knee_x {
                    lin
                } else if lin <= end {
                    knee_x
                } else {
                    knee_x + resume_slope * (lin - end)
                })
            }
        }
    }
}

fn check_tau_ref(tau_ref: f64) -> Result<()> {
    if !(tau_ref > 0.0 && tau_ref.is_finite()) {
        return Err(SynthError::Invalid("tau_ref must be positive".into()));
    }
    Ok(())
}

fn check_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(SynthError::Invalid(format!("empty {what} grid")));
    }
    if grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SynthError::Invalid(format!("{what} grid must be finite and non-negative")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SynthError::Invalid(format!("{what} grid must be strictly increasing")));
    }
    Ok(())
}

/// RNG stream for entry `entry` of series `series` within protocol family `family`.
pub fn stream_id(family: u8, series: usize, entry: usize) -> u64 {
    (u64::from(family) << 56) | ((series as u64 & 0xff_ffff) << 32) | (entry as u64 & 0xffff_ffff)
}

/// Population `e^{−Γt}` sampled on `times`, with averaged-readout noise clipped to `[−0.1, 1.1]`.
pub fn t1_trace_for_rate(
    gamma: f64,
    times: &[f64],
    noise: &NoiseModel,
    seed: u64,
    stream: u64,
) -> Result<MeasurementTrace> {
    check_grid(times, "time")?;
    noise.validate()?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(SynthError::Invalid(format!("decay rate must be finite and non-negative, got {gamma}")));
    }
    let sigma = noise.effective_sigma();
    let mut rng = task_rng(seed, stream);
    let values = times
        .iter()
        .map(|t| {
            let clean = (-gamma * t).exp();
            if noise.enabled {
                (clean + gaussian(&mut rng, sigma)).clamp(-0.1, 1.1)
            } else {
                clean
            }
        })
        .collect();
    Ok(MeasurementTrace {
        protocol: Protocol::T1Decay,
        times: times.to_vec(),
        values,
        sigma: vec![sigma; times.len()],
        seed,
        meta: BTreeMap::from([("gamma_per_s".to_string(), gamma)]),
    })
}

/// T1 trace at the decay rate set by injected density `x_qp`.
pub fn gen_t1_trace(
    dev: &DeviceParams,
    x_qp: f64,
    times: &[f64],
    noise: &NoiseModel,
    seed: u64,
    stream: u64,
) -> Result<MeasurementTrace> {
    dev.validate()?;
    let mut trace = t1_trace_for_rate(decay_rate(dev, x_qp)?, times, noise, seed, stream)?;
    trace.meta.insert("x_qp".into(), x_qp);
    Ok(trace)
}

/// Ramsey fringe `0.5·(1 + e^{−t/T₂*}·cos(2π·f·t))` with
/// `f = detune + δω(x_qp)/2π`, `detune` being the nominal detuning in Hz.
#[allow(clippy::too_many_arguments)]
pub fn gen_ramsey_trace(
    dev: &DeviceParams,
    x_qp: f64,
    slope_scale: f64,
    t2_star: f64,
    detune: f64,
    times: &[f64],
    noise: &NoiseModel,
    seed: u64,
    stream: u64,
) -> Result<MeasurementTrace> {
    dev.validate()?;
    check_grid(times, "time")?;
    noise.validate()?;
    if !(t2_star > 0.0) {
        return Err(SynthError::Invalid("T2* must be positive".into()));
    }
    let f = detune + freq_shift(dev, x_qp, slope_scale)? / (2.0 * PI);
    let sigma = noise.effective_sigma();
    let mut rng = task_rng(seed, stream);
    let values = times
        .iter()
        .map(|t| {
            let clean = 0.5 * (1.0 + (-t / t2_star).exp() * (2.0 * PI * f * t).cos());
            if noise.enabled {
                (clean + gaussian(&mut rng, sigma)).clamp(-0.1, 1.1)
            } else {
                clean
            }
        })
        .collect();
    Ok(MeasurementTrace {
        protocol: Protocol::Ramsey,
        times: times.to_vec(),
        values,
        sigma: vec![sigma; times.len()],
        seed,
        meta: BTreeMap::from([
            ("x_qp".to_string(), x_qp),
            ("t2_star_s".to_string(), t2_star),
            ("detune_hz".to_string(), f),
        ]),
    })
}

/// One T1 trace per delay, each at the rate `Γ(τ_opt)` of the recovery model.
///
/// Early delays whose rate exceeds what the T1 grid can resolve are generated
/// anyway; deciding measurability is left to the analysis. Entry `j` draws from
/// stream `stream_id(1, series, j)`.
#[allow(clippy::too_many_arguments)]
pub fn gen_recovery_sweep(
    dev: &DeviceParams,
    dyn_: &QpDynamics,
    drive: &OpticalDrive,
    delays: &[f64],
    t1_times: &[f64],
    noise: &NoiseModel,
    seed: u64,
    series: usize,
) -> Result<Vec<RecoveryEntry>> {
    dev.validate()?;
    drive.validate()?;
    check_grid(delays, "delay")?;
    let gammas = gamma_recovery(dev, dyn_, delays)?;
    delays
        .par_iter()
        .zip(gammas)
        .enumerate()
        .map(|(j, (tau, gamma))| {
            let mut trace = t1_trace_for_rate(gamma, t1_times, noise, seed, stream_id(1, series, j))?;
            trace.meta.insert("x_in".into(), dyn_.x_in);
            trace.meta.insert("s_per_s".into(), dyn_.s);
            trace.meta.insert("r_per_s".into(), dyn_.r);
            Ok(RecoveryEntry { tau_opt: *tau, trace })
        })
        .collect()
}

/// Shared description of a pulsed recovery campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDesign {
    /// Trapping rate, s⁻¹.
    pub s: f64,
    /// Recombination rate, s⁻¹.
    pub r: f64,
    pub map: InjectionMap,
    pub delays: Vec<f64>,
    pub t1_times: Vec<f64>,
    pub noise: NoiseModel,
}

impl RecoveryDesign {
    fn series(
        &self,
        dev: &DeviceParams,
        drive: OpticalDrive,
        sweep: SweepKind,
        label: String,
        seed: u64,
        index: usize,
    ) -> Result<RecoverySeries> {
        let x_in = self.map.x_in(&drive)?;
        let dyn_ = QpDynamics::from_steady_state(self.s, self.r, dev.background_xqp(), x_in)?;
        let entries = gen_recovery_sweep(dev, &dyn_, &drive, &self.delays, &self.t1_times, &self.noise, seed, index)?;
        Ok(RecoverySeries { label, sweep, drive, entries })
    }
}

/// Recovery series at each of `powers`, all with the pulse length of `drive`.
/// Series `k` uses index `first_index + k` for its noise streams.
pub fn gen_power_sweep(
    dev: &DeviceParams,
    design: &RecoveryDesign,
    drive: &OpticalDrive,
    powers: &[f64],
    seed: u64,
    first_index: usize,
) -> Result<Vec<RecoverySeries>> {
    powers
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = OpticalDrive { power: *p, ..*drive };
            let label = format!("{}-power-{k:02}", drive.position);
            design.series(dev, d, SweepKind::Power, label, seed, first_index + k)
        })
        .collect()
}

/// Recovery series at each pulse length, all at the power of `drive`.
pub fn gen_pulselen_sweep(
    dev: &DeviceParams,
    design: &RecoveryDesign,
    drive: &OpticalDrive,
    pulse_lens: &[f64],
    seed: u64,
    first_index: usize,
) -> Result<Vec<RecoverySeries>> {
    pulse_lens
        .iter()
        .enumerate()
        .map(|(k, tau)| {
            let d = OpticalDrive { pulse_len: *tau, ..*drive };
            let label = format!("{}-length-{k:02}", drive.position);
            design.series(dev, d, SweepKind::PulseLength, label, seed, first_index + k)
        })
        .collect()
}

/// Coherence model of a CW sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwDesign {
    /// Pure-dephasing time, s; `None` means T₂* = 2T₁.
    pub t_phi: Option<f64>,
    /// Ratio of the frequency pull to the theory value.
    pub slope_scale: f64,
    pub noise: CwNoise,
}

impl Default for CwDesign {
    fn default() -> Self {
        Self { t_phi: Some(16e-6), slope_scale: 1.0, noise: CwNoise::default() }
    }
}

/// Repeated (T₁, T₂*, δω) at each CW power; noise acts on the extracted
/// parameters, one draw per repetition.
pub fn gen_cw_sweep(
    dev: &DeviceParams,
    drive: &OpticalDrive,
    powers: &[f64],
    design: &CwDesign,
    seed: u64,
    stream: u64,
) -> Result<CwDataset> {
    dev.validate()?;
    drive.validate()?;
    check_grid(powers, "power")?;
    let nz = &design.noise;
    if nz.repeats == 0 || !(nz.t1_rel >= 0.0 && nz.t2_rel >= 0.0 && nz.freq_hz >= 0.0) {
        return Err(SynthError::Invalid("CW noise needs repeats ≥ 1 and non-negative deviations".into()));
    }
    let mut rng = task_rng(seed, stream);
    let mut points = Vec::with_capacity(powers.len());
    for &power in powers {
        let d = OpticalDrive { power, ..*drive };
        let gamma = cw_gamma(dev, &d)?;
        let coh = CoherenceSet::compose(1.0 / gamma, design.t_phi)?;
        let shift = freq_shift(dev, d.cw_xqp(), design.slope_scale)?;
        let mut p = CwPoint {
            power,
            t1: Vec::with_capacity(nz.repeats),
            t2_star: Vec::with_capacity(nz.repeats),
            shift: Vec::with_capacity(nz.repeats),
        };
        for _ in 0..nz.repeats {
            if nz.enabled {
                // keep draws positive; a 3% deviation never gets near the clip
                p.t1.push(coh.t1 * (1.0 + gaussian(&mut rng, nz.t1_rel)).max(0.05));
                p.t2_star.push(coh.t2_star * (1.0 + gaussian(&mut rng, nz.t2_rel)).max(0.05));
                p.shift.push(shift + 2.0 * PI * gaussian(&mut rng, nz.freq_hz));
            } else {
                p.t1.push(coh.t1);
                p.t2_star.push(coh.t2_star);
                p.shift.push(shift);
            }
        }
        points.push(p);
    }
    Ok(CwDataset { position: drive.position, seed, points })
}

/// Amplitude sweep of the e↔f Rabi oscillation.
///
/// The signal is `A·(1 − cos(π·a/a_π))/2` with `A = p_e` without the preceding
/// g↔e π-pulse and `A = 1 − p_e` with it. The abscissa is the drive amplitude
/// in units where `a_π = 1`.
pub fn gen_ef_rabi(
    dev: &DeviceParams,
    temp: f64,
    with_pi_pulse: bool,
    amplitudes: &[f64],
    noise: &NoiseModel,
    seed: u64,
    stream: u64,
) -> Result<MeasurementTrace> {
    check_grid(amplitudes, "amplitude")?;
    noise.validate()?;
    if !(temp > 0.0) {
        return Err(SynthError::Invalid("temperature must be positive".into()));
    }
    let p_e = excited_population(dev, temp)?;
    let amp = if with_pi_pulse { 1.0 - p_e } else { p_e };
    let sigma = noise.effective_sigma();
    let mut rng = task_rng(seed, stream);
    let values = amplitudes
        .iter()
        .map(|a| {
            let clean = amp * 0.5 * (1.0 - (PI * a).cos());
            if noise.enabled {
                clean + gaussian(&mut rng, sigma)
            } else {
                clean
            }
        })
        .collect();
    Ok(MeasurementTrace {
        protocol: Protocol::EfRabi,
        times: amplitudes.to_vec(),
        values,
        sigma: vec![sigma; amplitudes.len()],
        seed,
        meta: BTreeMap::from([
            ("temp_k".to_string(), temp),
            ("p_e".to_string(), p_e),
            ("with_pi_pulse".to_string(), if with_pi_pulse { 1.0 } else { 0.0 }),
        ]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{qp_coupling, thermometry, Position};
    use crate::synth::linspace;

    fn dev() -> DeviceParams {
        DeviceParams::reference()
    }

    #[test]
    fn t1_noiseless_values() {
        let tr = t1_trace_for_rate(1e5, &[0.0, 10e-6], &NoiseModel::default().off(), 1, 0).unwrap();
        assert_eq!(tr.values[0], 1.0);
        assert!((tr.values[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(tr.sigma.iter().all(|s| (*s - 0.01).abs() < 1e-15));
    }

    #[test]
    fn t1_deterministic_and_noise_law() {
        let t = linspace(0.0, 1e-3, 10_000);
        let noise = NoiseModel::new(0.1, 100);
        let a = gen_t1_trace(&dev(), 0.0, &t, &noise, 11, 3).unwrap();
        let b = gen_t1_trace(&dev(), 0.0, &t, &noise, 11, 3).unwrap();
        assert_eq!(a, b);
        let n = a.len() as f64;
        let var = a.times.iter().zip(&a.values).map(|(t, v)| (v - (-1e5 * t).exp()).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        assert!((sd - 0.01).abs() < 0.002, "{sd}");
    }

    #[test]
    fn ramsey_examples() {
        let noise = NoiseModel::default().off();
        let tr = gen_ramsey_trace(&dev(), 0.0, 1.0, 10e-6, 1e6, &[0.0, 0.5e-6], &noise, 0, 0).unwrap();
        assert_eq!(tr.values[0], 1.0);
        assert!((tr.values[1] - 0.5 * (1.0 - (-0.05f64).exp())).abs() < 1e-12);
        assert!((tr.values[1] - 0.0244).abs() < 1e-4);

        let t = linspace(0.0, 40e-6, 400);
        let tr = gen_ramsey_trace(&dev(), 1e-5, 1.0, 8e-6, 2e6, &t, &noise, 0, 0).unwrap();
        for (t, v) in tr.times.iter().zip(&tr.values) {
            assert!((v - 0.5).abs() <= 0.5 * (-t / 8e-6).exp() + 1e-15);
        }
    }

    fn design(s: f64) -> RecoveryDesign {
        RecoveryDesign {
            s,
            r: 0.0,
            map: InjectionMap::default(),
            delays: vec![0.11e-3, 0.22e-3, 0.33e-3],
            t1_times: linspace(0.0, 40e-6, 41),
            noise: NoiseModel::default().off(),
        }
    }

    #[test]
    fn recovery_ratios_follow_trapping() {
        let d = dev();
        let dyn_ = QpDynamics::trapping_only(&d, 9e3, 1e-4).unwrap();
        let drive = OpticalDrive { position: Position::A, power: 1e-7, pulse_len: 1e-5, mu: 1e3, lambda_shift: 0.0 };
        let des = design(9e3);
        let e = gen_recovery_sweep(&d, &dyn_, &drive, &des.delays, &des.t1_times, &des.noise, 1, 0).unwrap();
        let ex: Vec<f64> = e.iter().map(|e| e.trace.meta["gamma_per_s"] - d.gamma0).collect();
        for w in ex.windows(2) {
            assert!((w[1] / w[0] - (-0.99f64).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_injection_is_baseline() {
        let d = dev();
        let drive = OpticalDrive { position: Position::C, power: 0.0, pulse_len: 1e-5, mu: 30.0, lambda_shift: 0.0 };
        let des = design(9e3);
        let s = gen_power_sweep(&d, &des, &drive, &[0.0], 3, 0).unwrap();
        let base = t1_trace_for_rate(d.gamma0, &des.t1_times, &des.noise, 3, 0).unwrap();
        for e in &s[0].entries {
            assert_eq!(e.trace.values, base.values);
        }
    }

    #[test]
    fn equal_energy_gives_identical_series() {
        let d = dev();
        let des = RecoveryDesign { noise: NoiseModel::default(), ..design(9e3) };
        let a = OpticalDrive { position: Position::A, power: 1e-6, pulse_len: 10e-6, mu: 1750.0, lambda_shift: 0.0 };
        let b = OpticalDrive { power: 10e-6, pulse_len: 1e-6, ..a };
        let sa = gen_pulselen_sweep(&d, &des, &a, &[10e-6], 4, 0).unwrap();
        let sb = gen_power_sweep(&d, &des, &b, &[10e-6], 4, 0).unwrap();
        let va: Vec<_> = sa[0].entries.iter().map(|e| e.trace.values.clone()).collect();
        let vb: Vec<_> = sb[0].entries.iter().map(|e| e.trace.values.clone()).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn injection_maps() {
        let drive =
            |p: f64| OpticalDrive { position: Position::A, power: p, pulse_len: 10e-6, mu: 1e3, lambda_shift: 0.0 };
        let lin = InjectionMap::default();
        assert!((lin.x_in(&drive(1e-7)).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lin.x_in(&OpticalDrive { pulse_len: 0.0, ..drive(1e-6) }).unwrap(), 0.0);
        let pw = InjectionMap::Piecewise { tau_ref: 10e-6, knee_x: 1e-3, plateau_factor: 5.0, resume_slope: 0.5 };
        assert!((pw.x_in(&drive(1e-7)).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(pw.x_in(&drive(3e-6)).unwrap(), 1e-3);
        assert!((pw.x_in(&drive(7e-6)).unwrap() - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn cw_linearity_and_collapse() {
        let d = dev();
        let des = CwDesign { noise: CwNoise { enabled: false, ..CwNoise::default() }, ..CwDesign::default() };
        let mu_c = 2.96e-8 * 1e9;
        let c = OpticalDrive::cw(Position::C, 0.0, mu_c);
        let ds = gen_cw_sweep(&d, &c, &[0.0, 1e-6, 2e-6], &des, 0, 0).unwrap();
        let ex: Vec<f64> = ds.points.iter().map(|p| 1.0 / p.t1[0] - d.gamma0).collect();
        assert!(ex[0].abs() < 1e-6);
        assert!((ex[2] / ex[1] - 2.0).abs() < 1e-10);
        assert!((ex[1] - qp_coupling(&d) * mu_c * 1e-6).abs() < 1e-6 * ex[1]);

        let a = OpticalDrive::cw(Position::A, 0.0, 59.0 * mu_c);
        let da = gen_cw_sweep(&d, &a, &[1e-6 / 59.0], &des, 0, 0).unwrap();
        assert!((1.0 / da.points[0].t1[0] - 1.0 / ds.points[1].t1[0]).abs() < 1e-6);
    }

    #[test]
    fn ef_rabi_amplitudes() {
        let d = dev();
        let temp = thermometry(&d, 0.191).unwrap();
        let amps = linspace(0.0, 2.0, 41);
        let noise = NoiseModel::default().off();
        let without = gen_ef_rabi(&d, temp, false, &amps, &noise, 0, 0).unwrap();
        let with = gen_ef_rabi(&d, temp, true, &amps, &noise, 0, 1).unwrap();
        let peak = |t: &MeasurementTrace| t.values.iter().copied().fold(f64::MIN, f64::max);
        assert!((peak(&without) / peak(&with) - 0.191 / 0.809).abs() < 1e-9);
        assert!((peak(&without) + peak(&with) - 1.0).abs() < 1e-12);
    }
}
