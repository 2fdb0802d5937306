//! CW power sweeps: conversion constant, dephasing split and frequency pull.

use serde::{Deserialize, Serialize};

use super::{PipelineConfig, PipelineError, Result};
use crate::fit::fit_linear_weighted;
use crate::model::{
    cw_gamma, dephasing_decompose, freq_shift_slope, qp_coupling, DeviceParams, OpticalDrive, Position,
};
use crate::pipeline::recovery::mean_and_sample_std;
use crate::synth::CwDataset;

/// Averages of the repeated measurements at one power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwRow {
    pub power: f64,
    pub gamma: f64,
    pub gamma_err: f64,
    pub t1: f64,
    pub t2_star: f64,
    pub t2_star_err: f64,
    /// `None` either for `T₂* = 2T₁` or for an infeasible point (see `infeasible`).
    pub t_phi: Option<f64>,
    pub infeasible: bool,
    /// `T₂* / 2T₁`.
    pub t2_ratio: f64,
    pub shift: f64,
    pub shift_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwAnalysis {
    pub position: Position,
    /// Conversion constant, density per W.
    pub mu: f64,
    pub mu_err: f64,
    pub gamma0: f64,
    pub gamma0_err: f64,
    pub rows: Vec<CwRow>,
    /// Fitted `dδω/dP`, rad·s⁻¹·W⁻¹.
    pub shift_slope: f64,
    pub shift_slope_err: f64,
    /// Theory slope for the fitted μ.
    pub theory_slope: f64,
    /// Fitted over theory slope.
    pub shift_ratio: f64,
    pub shift_ratio_err: f64,
    /// Mean `T₂*/2T₁` over the top power decade.
    pub top_decade_t2_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

/// Standard error of the mean, floored at `floor_rel·|mean|`.
fn sem(v: &[f64], floor_rel: f64) -> (f64, f64) {
    let (mean, std) = mean_and_sample_std(v);
    let err = std / (v.len() as f64).sqrt();
    (mean, err.max(floor_rel * mean.abs()))
}

pub fn analyze_cw(dev: &DeviceParams, ds: &CwDataset, cfg: &PipelineConfig) -> Result<CwAnalysis> {
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for p in &ds.points {
        let n = p.t1.len();
        let finite = p.t1.iter().chain(&p.t2_star).chain(&p.shift).all(|v| v.is_finite());
        if n == 0 || p.t2_star.len() != n || p.shift.len() != n || !finite || p.t1.iter().any(|t| *t <= 0.0) {
            warnings.push(format!("position {}: malformed point at P = {:e} W dropped", ds.position, p.power));
            continue;
        }
        let rates: Vec<f64> = p.t1.iter().map(|t| 1.0 / t).collect();
        let (gamma, gamma_err) = sem(&rates, cfg.rate_floor_rel);
        let (t1, _) = sem(&p.t1, 0.0);
        let (t2_star, t2_star_err) = sem(&p.t2_star, cfg.rate_floor_rel);
        let (shift, shift_err) = sem(&p.shift, 0.0);
        let (t_phi, infeasible) = match dephasing_decompose(t1, t2_star) {
            Ok(c) => (c.t_phi, false),
            Err(_) => {
                warnings.push(format!(
                    "position {}: T2* = {t2_star:e} s exceeds 2T1 = {:e} s at P = {:e} W, excluded from dephasing",
                    ds.position,
                    2.0 * t1,
                    p.power
                ));
                (None, true)
            }
        };
        rows.push(CwRow {
            power: p.power,
            gamma,
            gamma_err,
            t1,
            t2_star,
            t2_star_err,
            t_phi,
            infeasible,
            t2_ratio: t2_star / (2.0 * t1),
            shift,
            shift_err,
        });
    }
    if rows.len() < 2 {
        return Err(PipelineError::InsufficientData(format!(
            "position {}: CW analysis needs at least 2 powers, have {}",
            ds.position,
            rows.len()
        )));
    }
    // floor the shift errors on the sweep's scale so a noiseless zero shift
    // still carries a finite weight
    let shift_scale = rows.iter().map(|r| r.shift.abs()).fold(0.0, f64::max);
    let shift_floor = (cfg.rate_floor_rel * shift_scale).max(f64::MIN_POSITIVE);
    for r in &mut rows {
        r.shift_err = r.shift_err.max(shift_floor);
    }
    let c = qp_coupling(dev);
    let p: Vec<f64> = rows.iter().map(|r| r.power).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let ge: Vec<f64> = rows.iter().map(|r| r.gamma_err).collect();
    let lin = fit_linear_weighted(&p, &g, &ge)?;
    let mu = lin.slope / c;
    let mu_err = lin.slope_err / c;

    let w: Vec<f64> = rows.iter().map(|r| r.shift).collect();
    let we: Vec<f64> = rows.iter().map(|r| r.shift_err).collect();
    let sl = fit_linear_weighted(&p, &w, &we)?;
    let theory_slope = freq_shift_slope(dev) * mu;
    let shift_ratio = sl.slope / theory_slope;
    let shift_ratio_err = shift_ratio.abs() * ((sl.slope_err / sl.slope).powi(2) + (mu_err / mu).powi(2)).sqrt();

    let p_max = p.iter().copied().fold(0.0, f64::max);
    let top: Vec<f64> = rows.iter().filter(|r| r.power >= p_max / 10.0 && r.power > 0.0).map(|r| r.t2_ratio).collect();
    let top_decade_t2_ratio = (!top.is_empty()).then(|| top.iter().sum::<f64>() / top.len() as f64);

    Ok(CwAnalysis {
        position: ds.position,
        mu,
        mu_err,
        gamma0: lin.intercept,
        gamma0_err: lin.intercept_err,
        rows,
        shift_slope: sl.slope,
        shift_slope_err: sl.slope_err,
        theory_slope,
        shift_ratio,
        shift_ratio_err,
        top_decade_t2_ratio,
        warnings,
    })
}

/// `μ_X / μ_ref` for every analysed position, with propagated error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRatio {
    pub position: Position,
    pub reference: Position,
    pub ratio: f64,
    pub ratio_err: f64,
}

/// Ratios against position C when present, else against the weakest position.
pub fn collapse_ratios(analyses: &[CwAnalysis]) -> Vec<CollapseRatio> {
    let reference = analyses
        .iter()
        .find(|a| a.position == Position::C)
        .or_else(|| analyses.iter().min_by(|a, b| a.mu.total_cmp(&b.mu)));
    let Some(reference) = reference else { return Vec::new() };
    analyses
        .iter()
        .map(|a| {
            let ratio = a.mu / reference.mu;
            let ratio_err = if a.position == reference.position {
                0.0
            } else {
                ratio * ((a.mu_err / a.mu).powi(2) + (reference.mu_err / reference.mu).powi(2)).sqrt()
            };
            CollapseRatio { position: a.position, reference: reference.position, ratio, ratio_err }
        })
        .collect()
}

/// Largest relative gap between `Γ_X(P·μ_ref/μ_X)` and `Γ_ref(P)` over `powers`.
pub fn collapse_residual(dev: &DeviceParams, mu_x: f64, mu_ref: f64, powers: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &p in powers {
        let a = cw_gamma(dev, &OpticalDrive::cw(Position::A, p * mu_ref / mu_x, mu_x))?;
        let b = cw_gamma(dev, &OpticalDrive::cw(Position::C, p, mu_ref))?;
        worst = worst.max((a - b).abs() / b);
    }
    Ok(worst)
}
