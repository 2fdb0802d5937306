//! Run configuration (TOML).
//!
//! Every key carries its unit in the name. Missing sections and keys take the
//! defaults below; unknown keys are rejected. A minimal file:
//!
//! ```toml
//! seed = 7
//!
//! [dynamics]
//! s_khz = 9.0
//! r_mhz = 0.0
//!
//! [drive.A]
//! mu_per_nw = 1.75e-6
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qpdyn::imaging::{BeamSpec, Disk, GridSpec, Rect, SceneGeometry, DEFAULT_C_OFFSET};
use qpdyn::model::{qp_coupling, DeviceParams, Position, QpDynamics};
use qpdyn::pipeline::{default_r_grid, PipelineConfig, TailPolicy, TruncationConfig};
use qpdyn::synth::{CampaignConfig, CwDesign, CwNoise, CwPlan, InjectionMap, NoiseModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub device: DeviceSection,
    pub dynamics: DynamicsSection,
    pub drive: DriveSection,
    pub noise: NoiseSection,
    pub recovery: RecoverySection,
    pub cw: CwSection,
    pub traces: TraceSection,
    pub pipeline: PipelineSection,
    pub scene: SceneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("qpdyn-out"),
            device: DeviceSection::default(),
            dynamics: DynamicsSection::default(),
            drive: DriveSection::default(),
            noise: NoiseSection::default(),
            recovery: RecoverySection::default(),
            cw: CwSection::default(),
            traces: TraceSection::default(),
            pipeline: PipelineSection::default(),
            scene: SceneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub f_q_ghz: f64,
    pub f_gap_ghz: f64,
    pub gamma0_per_s: f64,
    pub gamma_ext_per_s: f64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self { f_q_ghz: 6.30, f_gap_ghz: 46.9, gamma0_per_s: 1e5, gamma_ext_per_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub s_khz: f64,
    pub r_mhz: f64,
    /// Background generation rate. When set, the steady state it implies
    /// replaces the one inferred from `gamma0_per_s` (Γ₀ = Γ_ext + C·x₀).
    pub g_per_s: Option<f64>,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { s_khz: 9.0, r_mhz: 0.0, g_per_s: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveBlock {
    pub mu_per_nw: f64,
    /// Frequency-pull coefficient, rad·s⁻¹ per nW. Recorded only; the pull
    /// used by the generators follows from μ and `cw.slope_scale`.
    pub lambda_rad_s_per_nw: f64,
    pub pulse_us: f64,
}

impl DriveBlock {
    fn with_mu(mu_per_nw: f64) -> Self {
        Self { mu_per_nw, lambda_rad_s_per_nw: 0.0, pulse_us: 10.0 }
    }

    pub fn mu_per_w(&self) -> f64 {
        self.mu_per_nw / 1e-9
    }

    pub fn pulse_s(&self) -> f64 {
        self.pulse_us / 1e6
    }
}

impl Default for DriveBlock {
    fn default() -> Self {
        Self::with_mu(1.75e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSection {
    #[serde(rename = "A")]
    pub a: DriveBlock,
    #[serde(rename = "B")]
    pub b: DriveBlock,
    #[serde(rename = "C")]
    pub c: DriveBlock,
}

impl Default for DriveSection {
    fn default() -> Self {
        Self { a: DriveBlock::with_mu(1.75e-6), b: DriveBlock::with_mu(1.61e-5), c: DriveBlock::with_mu(2.96e-8) }
    }
}

impl DriveSection {
    pub fn get(&self, p: Position) -> &DriveBlock {
        match p {
            Position::A => &self.a,
            Position::B => &self.b,
            Position::C => &self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub enabled: bool,
    pub sigma_read: f64,
    pub n_avg: u32,
    /// Relative spread of one CW T1 repetition.
    pub cw_t1_rel: f64,
    pub cw_t2_rel: f64,
    pub cw_freq_khz: f64,
    pub cw_repeats: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseModel::default();
        let c = CwNoise::default();
        Self {
            enabled: true,
            sigma_read: n.sigma_read,
            n_avg: n.n_avg,
            cw_t1_rel: c.t1_rel,
            cw_t2_rel: c.t2_rel,
            cw_freq_khz: c.freq_hz / 1e3,
            cw_repeats: c.repeats,
        }
    }
}

impl NoiseSection {
    pub fn model(&self) -> NoiseModel {
        NoiseModel { sigma_read: self.sigma_read, n_avg: self.n_avg, enabled: self.enabled }
    }

    pub fn cw(&self) -> CwNoise {
        CwNoise {
            t1_rel: self.cw_t1_rel,
            t2_rel: self.cw_t2_rel,
            freq_hz: self.cw_freq_khz * 1e3,
            repeats: self.cw_repeats,
            enabled: self.enabled,
        }
    }
}

/// Optional linear–plateau–linear injection map (test shapes only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationBlock {
    pub knee_x: f64,
    pub plateau_factor: f64,
    pub resume_slope: f64,
}

/// Pulsed campaign at position A. List keys left out use the built-in grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    pub delay_max_us: f64,
    pub n_delays: usize,
    pub t1_min_ns: f64,
    pub t1_max_us: f64,
    pub n_t1: usize,
    pub tau_ref_us: f64,
    pub powers_nw: Option<Vec<f64>>,
    pub pulse_lens_us: Option<Vec<f64>>,
    pub length_power_nw: f64,
    pub saturation: Option<SaturationBlock>,
}

impl Default for RecoverySection {
    fn default() -> Self {
        Self {
            delay_max_us: 2000.0,
            n_delays: 81,
            t1_min_ns: 4.0,
            t1_max_us: 60.0,
            n_t1: 60,
            tau_ref_us: 10.0,
            powers_nw: None,
            pulse_lens_us: None,
            length_power_nw: 500.0,
            saturation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwSection {
    pub positions: Vec<Position>,
    /// Pure-dephasing time; ignored when `t2_limited`.
    pub t_phi_us: f64,
    pub t2_limited: bool,
    pub slope_scale: f64,
    /// CW densities μ·P spanned by each sweep.
    pub x_min: f64,
    pub x_max: f64,
    pub n_powers: usize,
}

impl Default for CwSection {
    fn default() -> Self {
        Self {
            positions: vec![Position::A, Position::B, Position::C],
            t_phi_us: 16.0,
            t2_limited: false,
            slope_scale: 0.83,
            x_min: 1e-6,
            x_max: 1e-3,
            n_powers: 16,
        }
    }
}

impl CwSection {
    pub fn design(&self, noise: &NoiseSection) -> CwDesign {
        let t_phi = (!self.t2_limited).then(|| self.t_phi_us / 1e6);
        CwDesign { t_phi, slope_scale: self.slope_scale, noise: noise.cw() }
    }
}

/// Grids for the single-trace protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub t1_points: usize,
    /// T1 grid length in units of 1/Γ.
    pub t1_span_decays: f64,
    pub ramsey_points: usize,
    /// Ramsey grid length in units of T₂*.
    pub ramsey_span_t2: f64,
    /// Nominal detuning; by default four fringes per T₂*.
    pub ramsey_detune_mhz: Option<f64>,
    pub ef_points: usize,
    /// Largest e↔f drive amplitude, in units of the π amplitude.
    pub ef_amp_max: f64,
    pub temp_mk: f64,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            t1_points: 101,
            t1_span_decays: 5.0,
            ramsey_points: 201,
            ramsey_span_t2: 3.0,
            ramsey_detune_mhz: None,
            ef_points: 101,
            ef_amp_max: 2.0,
            temp_mk: 165.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub low_power_threshold_nw: f64,
    pub low_power_xin_limit: f64,
    pub fixed_s_khz: Option<f64>,
    pub r_min_khz: f64,
    pub r_max_mhz: f64,
    /// Log-spaced points after r = 0.
    pub n_r: usize,
    /// Explicit grid, s⁻¹; overrides the three keys above.
    pub r_grid_per_s: Option<Vec<f64>>,
    pub truncation_slack_sigma: f64,
    pub allow_single_point: bool,
    pub tail: TailPolicy,
    pub max_rel_err: f64,
    pub rate_floor_rel: f64,
    pub linear_fit_max_power_nw: f64,
    pub saturation_sigma: f64,
    pub flat_tolerance: f64,
    pub max_exclusion_frac: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let t = p.truncation;
        Self {
            low_power_threshold_nw: 100.0,
            low_power_xin_limit: p.low_power_xin_limit,
            fixed_s_khz: None,
            r_min_khz: 20.0,
            r_max_mhz: 20.0,
            n_r: 50,
            r_grid_per_s: None,
            truncation_slack_sigma: t.slack,
            allow_single_point: t.allow_single_point,
            tail: t.tail,
            max_rel_err: t.max_rel_err,
            rate_floor_rel: p.rate_floor_rel,
            linear_fit_max_power_nw: 100.0,
            saturation_sigma: p.saturation_sigma,
            flat_tolerance: p.flat_tolerance,
            max_exclusion_frac: p.max_exclusion_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub walls: bool,
    pub aperture_um: [f64; 2],
    pub pad: bool,
    pub pad_center_um: [f64; 2],
    pub pad_size_um: [f64; 2],
    pub disk_center_um: Option<[f64; 2]>,
    pub disk_radius_um: Option<f64>,
    pub waist_um: f64,
    pub x_range_um: [f64; 2],
    pub nx: usize,
    pub y_range_um: [f64; 2],
    pub ny: usize,
    pub c_offset_um: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneGeometry::default();
        let (lo, hi) = s.aperture.unwrap_or((-250e-6, 250e-6));
        let pad = s.pad.unwrap_or(Rect { cx: 0.0, cy: 100e-6, width: 300e-6, height: 350e-6 });
        let g = GridSpec::default();
        let um = |v: f64| (v * 1e6 * 1e6).round() / 1e6;
        Self {
            walls: true,
            aperture_um: [um(lo), um(hi)],
            pad: true,
            pad_center_um: [um(pad.cx), um(pad.cy)],
            pad_size_um: [um(pad.width), um(pad.height)],
            disk_center_um: None,
            disk_radius_um: None,
            waist_um: um(BeamSpec::default().waist),
            x_range_um: [um(g.x_min), um(g.x_max)],
            nx: g.nx,
            y_range_um: [um(g.y_min), um(g.y_max)],
            ny: g.ny,
            c_offset_um: um(DEFAULT_C_OFFSET),
        }
    }
}

fn m(um: f64) -> f64 {
    um / 1e6
}

impl SceneSection {
    pub fn geometry(&self) -> Result<SceneGeometry> {
        let disk = match (self.disk_center_um, self.disk_radius_um) {
            (Some([cx, cy]), Some(r)) => Some(Disk { cx: m(cx), cy: m(cy), radius: m(r) }),
            (None, None) => None,
            _ => bail!("scene: disk_center_um and disk_radius_um must be given together"),
        };
        let pad = self.pad.then(|| Rect {
            cx: m(self.pad_center_um[0]),
            cy: m(self.pad_center_um[1]),
            width: m(self.pad_size_um[0]),
            height: m(self.pad_size_um[1]),
        });
        let aperture = self.walls.then(|| (m(self.aperture_um[0]), m(self.aperture_um[1])));
        let scene = SceneGeometry { aperture, pad, disk };
        scene.validate()?;
        Ok(scene)
    }

    pub fn beam(&self) -> Result<BeamSpec> {
        let b = BeamSpec { waist: m(self.waist_um), power: 1.0 };
        b.validate()?;
        Ok(b)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let g = GridSpec {
            x_min: m(self.x_range_um[0]),
            x_max: m(self.x_range_um[1]),
            nx: self.nx,
            y_min: m(self.y_range_um[0]),
            y_max: m(self.y_range_um[1]),
            ny: self.ny,
        };
        g.validate()?;
        Ok(g)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&src).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        self.device()?;
        self.campaign()?.validate()?;
        self.pipeline()?.validate()?;
        self.noise.model().validate()?;
        let t = &self.traces;
        if t.t1_points < 3 || t.ramsey_points < 3 || t.ef_points < 3 {
            bail!("traces: need at least 3 points per trace");
        }
        if !(t.t1_span_decays > 0.0 && t.ramsey_span_t2 > 0.0 && t.ef_amp_max > 0.0 && t.temp_mk > 0.0) {
            bail!("traces: spans, amplitude and temperature must be positive");
        }
        if !(self.cw.t_phi_us > 0.0) {
            bail!("cw: t_phi_us must be positive");
        }
        for p in [Position::A, Position::B, Position::C] {
            let d = self.drive.get(p);
            if !(d.mu_per_nw >= 0.0 && d.pulse_us >= 0.0 && d.lambda_rad_s_per_nw.is_finite()) {
                bail!("drive.{p}: mu_per_nw and pulse_us must be non-negative");
            }
        }
        self.scene.geometry()?;
        self.scene.beam()?;
        self.scene.grid()?;
        Ok(())
    }

    pub fn device(&self) -> Result<DeviceParams> {
        let d = &self.device;
        let mut dev = DeviceParams::new(d.f_q_ghz * 1e9, d.f_gap_ghz * 1e9, d.gamma0_per_s, d.gamma_ext_per_s)?;
        if let Some(g) = self.dynamics.g_per_s {
            let dyn_ = QpDynamics::from_generation(self.s_per_s(), self.r_per_s(), g, 0.0)?;
            dev.gamma0 = dev.gamma_ext + qp_coupling(&dev) * dyn_.x0;
            dev.validate()?;
        }
        Ok(dev)
    }

    pub fn s_per_s(&self) -> f64 {
        self.dynamics.s_khz * 1e3
    }

    pub fn r_per_s(&self) -> f64 {
        self.dynamics.r_mhz * 1e6
    }

    pub fn injection_map(&self) -> InjectionMap {
        let tau_ref = self.recovery.tau_ref_us / 1e6;
        match &self.recovery.saturation {
            None => InjectionMap::Linear { tau_ref },
            Some(s) => InjectionMap::Piecewise {
                tau_ref,
                knee_x: s.knee_x,
                plateau_factor: s.plateau_factor,
                resume_slope: s.resume_slope,
            },
        }
    }

    pub fn campaign(&self) -> Result<CampaignConfig> {
        let base = CampaignConfig::default();
        let r = &self.recovery;
        let a = &self.drive.a;
        let mut pulsed = base.pulsed[0].clone();
        pulsed.mu_per_w = a.mu_per_w();
        pulsed.pulse_len_s = a.pulse_s();
        if let Some(p) = &r.powers_nw {
            pulsed.powers_w = p.iter().map(|p| p / 1e9).collect();
        }
        if let Some(l) = &r.pulse_lens_us {
            pulsed.pulse_lens_s = l.iter().map(|t| t / 1e6).collect();
        }
        pulsed.length_power_w = r.length_power_nw / 1e9;
        let cw = self.cw.positions.iter().map(|&p| self.cw_plan(p)).collect::<Result<Vec<_>>>()?;
        Ok(CampaignConfig {
            s_per_s: self.s_per_s(),
            r_per_s: self.r_per_s(),
            map: self.injection_map(),
            delay_max_s: r.delay_max_us / 1e6,
            n_delays: r.n_delays,
            t1_min_s: r.t1_min_ns / 1e9,
            t1_max_s: r.t1_max_us / 1e6,
            n_t1: r.n_t1,
            noise: self.noise.model(),
            pulsed: vec![pulsed],
            cw_design: self.cw.design(&self.noise),
            cw,
        })
    }

    pub fn cw_plan(&self, p: Position) -> Result<CwPlan> {
        let mu = self.drive.get(p).mu_per_w();
        let c = &self.cw;
        if !(mu > 0.0 && c.x_min > 0.0 && c.x_max > c.x_min && c.n_powers >= 2) {
            bail!("cw: position {p} needs mu > 0, 0 < x_min < x_max and n_powers >= 2");
        }
        Ok(CwPlan {
            position: p,
            mu_per_w: mu,
            powers_w: qpdyn::synth::logspace(c.x_min / mu, c.x_max / mu, c.n_powers),
        })
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let p = &self.pipeline;
        let r_grid = match &p.r_grid_per_s {
            Some(g) => g.clone(),
            None if p.n_r == 0 => vec![0.0],
            None => default_r_grid(p.r_min_khz * 1e3, p.r_max_mhz * 1e6, p.n_r),
        };
        Ok(PipelineConfig {
            device: self.device()?,
            low_power_threshold: p.low_power_threshold_nw / 1e9,
            low_power_xin_limit: p.low_power_xin_limit,
            fixed_s: p.fixed_s_khz.map(|s| s * 1e3),
            r_grid,
            truncation: TruncationConfig {
                slack: p.truncation_slack_sigma,
                allow_single_point: p.allow_single_point,
                tail: p.tail,
                max_rel_err: p.max_rel_err,
            },
            rate_floor_rel: p.rate_floor_rel,
            linear_fit_max_power: p.linear_fit_max_power_nw / 1e9,
            saturation_sigma: p.saturation_sigma,
            flat_tolerance: p.flat_tolerance,
            max_exclusion_frac: p.max_exclusion_frac,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_library_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.campaign().unwrap(), CampaignConfig::default());
        assert_eq!(cfg.pipeline().unwrap(), PipelineConfig::default());
        assert_eq!(cfg.scene.geometry().unwrap(), SceneGeometry::default());
        assert_eq!(cfg.scene.grid().unwrap(), GridSpec::default());
        assert_eq!(cfg.device().unwrap(), DeviceParams::reference());
    }

    #[test]
    fn empty_file_is_default_and_round_trips() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn units_are_converted() {
        let cfg = RunConfig::from_toml(
            "[dynamics]\ns_khz = 12.5\nr_mhz = 2.0\n[pipeline]\nfixed_s_khz = 8.0\nlow_power_threshold_nw = 50.0\n[drive.B]\nmu_per_nw = 2e-5\n",
        )
        .unwrap();
        let c = cfg.campaign().unwrap();
        assert_eq!(c.s_per_s, 12.5e3);
        assert_eq!(c.r_per_s, 2e6);
        let p = cfg.pipeline().unwrap();
        assert_eq!(p.fixed_s, Some(8e3));
        assert!((p.low_power_threshold - 50e-9).abs() < 1e-22);
        assert!((cfg.drive.b.mu_per_w() - 2e4).abs() < 1e-9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        assert!(RunConfig::from_toml("[dynamics]\ns_hz = 9000\n").is_err());
        assert!(RunConfig::from_toml("[device]\nf_q_ghz = -1\n").is_err());
        assert!(RunConfig::from_toml("[pipeline]\nr_grid_per_s = [1e3, 1e4]\n").is_err());
        assert!(RunConfig::from_toml("[scene]\npad_center_um = [200, 0]\n").is_err());
    }

    #[test]
    fn generation_rate_sets_background() {
        let cfg = RunConfig::from_toml("[dynamics]\ns_khz = 10.0\ng_per_s = 1e-2\n").unwrap();
        let dev = cfg.device().unwrap();
        assert!((dev.background_xqp() - 1e-6).abs() < 1e-18);
    }
}
