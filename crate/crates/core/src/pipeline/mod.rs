//! End-to-end analysis of a measurement bundle.
//!
//! The stages run in a fixed order: per-delay T1 fits and truncation → trapping
//! rate from the low-power series (recombination off) → χ² sweep of the
//! recombination rate → final `(x_in, Γ₀)` fits with both rates fixed → CW
//! analysis → pulse-energy overlay. A report is produced even when stages fail;
//! each stage records its own status.

mod cw;
mod energy;
mod recovery;
mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fit::FitError;
use crate::model::{DeviceParams, ModelError};
use crate::synth::{Bundle, SweepKind, SynthError};

pub use cw::{analyze_cw, collapse_ratios, collapse_residual, CollapseRatio, CwAnalysis, CwRow};
pub use energy::{merge_by_energy, EnergyMerge, EnergyRow};
pub use recovery::{
    chi2_sweep_r, estimate_trapping, extract_xin_vs_power, fit_series_rates, mean_and_sample_std, prepare_dataset,
    truncate_unphysical, FittedPoint, RSweep, RecoveryDataset, TrappingEstimate, TrappingRow, XinLinearFit, XinRow,
    XinTable,
};
pub use report::{render_figures, write_figures, write_report, FIGURE_FILES};

pub const REPORT_SCHEMA: &str = "qpdyn-report/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("truncation rejected the dataset: {0}")]
    Truncation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("recombination sweep invalid: {0}")]
    SweepInvalid(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// How much of the series the monotonicity check covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    /// Every step after the index must be non-increasing (within slack).
    Strict,
    /// Only the steps up to the largest measured rate are checked.
    FromPeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    /// Tolerated rise between neighbours, in units of their combined σ.
    pub slack: f64,
    pub allow_single_point: bool,
    pub tail: TailPolicy,
    /// A T1 fit with `σ_Γ/Γ` above this counts as unmeasurable.
    pub max_rel_err: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self { slack: 1.0, allow_single_point: false, tail: TailPolicy::FromPeak, max_rel_err: 0.5 }
    }
}

/// `r = 0` followed by `n` log-spaced rates from `r_min` to `r_max`.
pub fn default_r_grid(r_min: f64, r_max: f64, n: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend(crate::synth::logspace(r_min, r_max, n));
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub device: DeviceParams,
    /// Series below this power (W) enter the trapping estimate.
    pub low_power_threshold: f64,
    /// Trapping-only fits above this injected density raise a warning.
    pub low_power_xin_limit: f64,
    /// Use this trapping rate (s⁻¹) instead of estimating it.
    pub fixed_s: Option<f64>,
    /// Recombination rates to test, s⁻¹; must start at 0.
    pub r_grid: Vec<f64>,
    pub truncation: TruncationConfig,
    /// Rate uncertainties are floored at this fraction of the rate.
    pub rate_floor_rel: f64,
    /// Upper power (W) of the low-power linear fit of `x_in(P)`.
    pub linear_fit_max_power: f64,
    /// Departure from the linear fit, in σ, that flags saturation.
    pub saturation_sigma: f64,
    /// Relative χ² rise that still counts as flat.
    pub flat_tolerance: f64,
    /// Largest tolerated fraction of non-converged refits in the r sweep.
    pub max_exclusion_frac: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            device: DeviceParams::reference(),
            low_power_threshold: 100e-9,
            low_power_xin_limit: 1e-4,
            fixed_s: None,
            r_grid: default_r_grid(20e3, 20e6, 50),
            truncation: TruncationConfig::default(),
            rate_floor_rel: 1e-3,
            linear_fit_max_power: 100e-9,
            saturation_sigma: 3.0,
            flat_tolerance: 0.05,
            max_exclusion_frac: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        let t = &self.truncation;
        let positive =
            [self.low_power_threshold, self.rate_floor_rel, self.linear_fit_max_power, self.saturation_sigma];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PipelineError::Config("thresholds and floors must be positive".into()));
        }
        if !(t.slack >= 0.0 && t.max_rel_err > 0.0) {
            return Err(PipelineError::Config("truncation slack must be ≥ 0 and max_rel_err > 0".into()));
        }
        if !(self.flat_tolerance >= 0.0) || !(0.0..=1.0).contains(&self.max_exclusion_frac) {
            return Err(PipelineError::Config("flat_tolerance ≥ 0 and max_exclusion_frac in [0, 1] required".into()));
        }
        if self.fixed_s.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(PipelineError::Config("fixed_s must be a non-negative rate".into()));
        }
        if self.r_grid.first() != Some(&0.0) || self.r_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PipelineError::Config("r grid must start at 0 and increase strictly".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Ok,
    Warning,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub state: StageState,
    pub messages: Vec<String>,
}

/// A rate used in the final fits: estimated (with error) or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateValue {
    pub value: f64,
    pub err: Option<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub bundle_seed: u64,
    pub bundle_sha256: String,
    pub config_sha256: String,
    /// Filled in by the caller; `run_full` itself never reads the clock.
    pub generated_unix_s: Option<u64>,
    /// Generating parameters recorded in the bundle, if any.
    pub truth: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: String,
    pub ok: bool,
    pub stages: Vec<StageStatus>,
    pub provenance: Provenance,
    /// Conventions that affect the numbers below.
    pub notes: BTreeMap<String, String>,
    pub config: PipelineConfig,
    pub datasets: Vec<RecoveryDataset>,
    pub trapping: Option<TrappingEstimate>,
    /// Trapping rate used for the sweep and final fits.
    pub s_used: Option<RateValue>,
    pub recombination: Option<RSweep>,
    /// Recombination rate used for the final fits.
    pub r_used: Option<RateValue>,
    pub injection: Option<XinTable>,
    pub cw: Vec<CwAnalysis>,
    pub collapse: Vec<CollapseRatio>,
    pub energy: Option<EnergyMerge>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&StageStatus> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Hex SHA-256 of the compact JSON form of `v`.
pub fn sha256_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn notes() -> BTreeMap<String, String> {
    [
        ("t1_model", "A·exp(−Γt) + B with the offset B floated; Γ ≥ 0"),
        ("chi2_average", "mean over datasets of the reduced χ² (χ²/dof)"),
        ("stderr_scaling", "standard errors scaled by √(χ²/dof) when χ²/dof > 1"),
        ("rate_floor", "rate uncertainties floored at rate_floor_rel × Γ"),
        ("truncation", "unmeasurable T1 fits force the index past them; monotonicity checked with σ slack"),
        ("background", "Γ_ext = 0, so the background density is Γ₀/C"),
        ("units", "SI throughout: s, s⁻¹, W, J; shifts in rad/s"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

struct Stages(Vec<StageStatus>);

impl Stages {
    fn push(&mut self, stage: &str, state: StageState, messages: Vec<String>) {
        let state = if state == StageState::Ok && !messages.is_empty() { StageState::Warning } else { state };
        self.0.push(StageStatus { stage: stage.to_string(), state, messages });
    }
}

/// Run every stage on `bundle`. Deterministic for a given `(cfg, bundle)`; the
/// dataset order in the bundle does not matter.
pub fn run_full(cfg: &PipelineConfig, bundle: &Bundle) -> PipelineReport {
    let dev = cfg.device;
    let mut stages = Stages(Vec::new());
    let mut report = PipelineReport {
        schema: REPORT_SCHEMA.to_string(),
        ok: false,
        stages: Vec::new(),
        provenance: Provenance {
            bundle_seed: bundle.seed,
            bundle_sha256: sha256_json(bundle),
            config_sha256: sha256_json(cfg),
            generated_unix_s: None,
            truth: bundle.truth.clone(),
        },
        notes: notes(),
        config: cfg.clone(),
        datasets: Vec::new(),
        trapping: None,
        s_used: None,
        recombination: None,
        r_used: None,
        injection: None,
        cw: Vec::new(),
        collapse: Vec::new(),
        energy: None,
    };
    if let Err(e) = cfg.validate() {
        stages.push("config", StageState::Failed, vec![e.to_string()]);
        report.stages = stages.0;
        return report;
    }

    // truncation
    let mut series: Vec<_> = bundle.recovery.iter().collect();
    series.sort_by(|a, b| {
        a.drive
            .position
            .cmp(&b.drive.position)
            .then(a.sweep.cmp(&b.sweep))
            .then(a.drive.power.total_cmp(&b.drive.power))
            .then(a.drive.pulse_len.total_cmp(&b.drive.pulse_len))
            .then(a.label.cmp(&b.label))
    });
    if series.is_empty() {
        stages.push("truncation", StageState::Skipped, vec!["bundle has no recovery series".into()]);
    } else {
        let prepared: Vec<_> = series.par_iter().map(|s| (s.label.clone(), prepare_dataset(s, cfg))).collect();
        let mut msgs = Vec::new();
        for (label, (ds, warnings)) in prepared {
            msgs.extend(warnings.into_iter().map(|w| format!("{label}: {w}")));
            match ds {
                Ok(ds) => report.datasets.push(ds),
                Err(e) => msgs.push(format!("{label}: rejected ({e})")),
            }
        }
        let state = if report.datasets.is_empty() { StageState::Failed } else { StageState::Ok };
        stages.push("truncation", state, msgs);
    }
    let datasets = report.datasets.clone();

    // trapping
    let s_used = if datasets.is_empty() {
        stages.push("trapping", StageState::Skipped, vec!["no usable recovery datasets".into()]);
        None
    } else if let Some(s) = cfg.fixed_s {
        stages.push("trapping", StageState::Ok, Vec::new());
        Some(RateValue { value: s, err: None, fixed: true })
    } else {
        match estimate_trapping(&dev, &datasets, cfg) {
            Ok(est) => {
                let v = RateValue { value: est.s_mean, err: Some(est.s_std), fixed: false };
                stages.push("trapping", StageState::Ok, est.warnings.clone());
                report.trapping = Some(est);
                Some(v)
            }
            Err(e) => {
                stages.push("trapping", StageState::Failed, vec![e.to_string()]);
                None
            }
        }
    };
    report.s_used = s_used;

    // recombination
    let r_used = match s_used {
        None => {
            stages.push("recombination", StageState::Skipped, vec!["no trapping rate".into()]);
            None
        }
        Some(s) => match chi2_sweep_r(&dev, &datasets, s.value, &cfg.r_grid, cfg) {
            Ok(sweep) => {
                let v = RateValue { value: sweep.r_best, err: None, fixed: cfg.r_grid.len() == 1 };
                stages.push("recombination", StageState::Ok, sweep.warnings.clone());
                report.recombination = Some(sweep);
                Some(v)
            }
            Err(e) => {
                stages.push("recombination", StageState::Failed, vec![e.to_string()]);
                None
            }
        },
    };
    report.r_used = r_used;

    // final fits
    match (s_used, r_used) {
        (Some(s), Some(r)) => {
            let table = extract_xin_vs_power(&dev, &datasets, s.value, r.value, cfg);
            let state = if table.rows.is_empty() { StageState::Failed } else { StageState::Ok };
            stages.push("final_fits", state, table.warnings.clone());
            report.injection = Some(table);
        }
        _ => stages.push("final_fits", StageState::Skipped, vec!["trapping or recombination rate unavailable".into()]),
    }

    // CW
    let mut cw_sets: Vec<_> = bundle.cw.iter().collect();
    cw_sets.sort_by_key(|d| d.position);
    if cw_sets.is_empty() {
        stages.push("cw", StageState::Skipped, vec!["bundle has no CW sweeps".into()]);
    } else {
        let mut msgs = Vec::new();
        for ds in cw_sets {
            match analyze_cw(&dev, ds, cfg) {
                Ok(a) => {
                    msgs.extend(a.warnings.iter().cloned());
                    report.cw.push(a);
                }
                Err(e) => msgs.push(format!("position {}: {e}", ds.position)),
            }
        }
        report.collapse = collapse_ratios(&report.cw);
        let state = if report.cw.is_empty() { StageState::Failed } else { StageState::Ok };
        stages.push("cw", state, msgs);
    }

    // energy overlay
    match &report.injection {
        Some(t) if !t.rows.is_empty() => {
            let (pw, ln): (Vec<XinRow>, Vec<XinRow>) =
                t.rows.iter().cloned().partition(|r| r.sweep == SweepKind::Power);
            let merged = merge_by_energy(&pw, &ln);
            stages.push("energy", StageState::Ok, merged.warnings.clone());
            report.energy = Some(merged);
        }
        _ => stages.push("energy", StageState::Skipped, vec!["no injected densities".into()]),
    }

    report.ok = stages.0.iter().all(|s| s.state != StageState::Failed)
        && stages.0.iter().any(|s| matches!(s.state, StageState::Ok | StageState::Warning));
    report.stages = stages.0;
    report
}
