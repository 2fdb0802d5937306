//! Pulsed-recovery analysis: per-delay T1 fits, truncation, trapping estimate,
//! recombination sweep and the final injected-density fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PipelineConfig, PipelineError, Result, TailPolicy, TruncationConfig};
use crate::fit::{fit_exponential, fit_linear_weighted, fit_recovery, fit_trapping, RatePoint};
use crate::model::{DeviceParams, OpticalDrive, Position};
use crate::synth::{RecoveryEntry, RecoverySeries, SweepKind};

/// Decay rate fitted from the T1 trace at one delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedPoint {
    pub tau: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// False when the T1 fit failed or its relative error exceeded the limit.
    pub measurable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDataset {
    pub label: String,
    pub sweep: SweepKind,
    pub drive: OpticalDrive,
    pub fitted: Vec<FittedPoint>,
    pub truncation_index: usize,
}

impl RecoveryDataset {
    /// Points from the truncation index on, with the variance floor applied.
    pub fn usable(&self, floor_rel: f64) -> Vec<RatePoint> {
        self.fitted[self.truncation_index..]
            .iter()
            .filter(|p| p.measurable)
            .map(|p| RatePoint { tau: p.tau, gamma: p.gamma, sigma: p.sigma.max(floor_rel * p.gamma.abs()) })
            .collect()
    }
}

/// Fit every delay of a series. Invalid traces are dropped and reported; a
/// trace whose fit fails stays in the series as an unmeasurable point.
pub fn fit_series_rates(entries: &[RecoveryEntry], max_rel_err: f64) -> (Vec<FittedPoint>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut sorted: Vec<&RecoveryEntry> = Vec::with_capacity(entries.len());
    for (j, e) in entries.iter().enumerate() {
        match e.trace.validate() {
            Ok(()) if e.tau_opt.is_finite() && e.tau_opt >= 0.0 => sorted.push(e),
            Ok(()) => warnings.push(format!("entry {j}: invalid delay {}", e.tau_opt)),
            Err(err) => warnings.push(format!("entry {j} (τ = {:e} s) dropped: {err}", e.tau_opt)),
        }
    }
    sorted.sort_by(|a, b| a.tau_opt.total_cmp(&b.tau_opt));
    let before = sorted.len();
    sorted.dedup_by(|a, b| a.tau_opt == b.tau_opt);
    if sorted.len() != before {
        warnings.push(format!("{} entries with duplicate delays dropped", before - sorted.len()));
    }
    let fitted = sorted
        .par_iter()
        .map(|e| match fit_exponential(&e.trace) {
            Ok(f) if f.gamma > 0.0 && f.gamma_err.is_finite() && f.gamma_err <= max_rel_err * f.gamma => {
                FittedPoint { tau: e.tau_opt, gamma: f.gamma, sigma: f.gamma_err, measurable: true }
            }
            Ok(f) => FittedPoint { tau: e.tau_opt, gamma: f.gamma, sigma: f.gamma_err, measurable: false },
            Err(_) => FittedPoint { tau: e.tau_opt, gamma: 0.0, sigma: 0.0, measurable: false },
        })
        .collect();
    (fitted, warnings)
}

fn within_slack(prev: &FittedPoint, next: &FittedPoint, slack: f64) -> bool {
    let tol = slack * (prev.sigma.powi(2) + next.sigma.powi(2)).sqrt();
    next.gamma <= prev.gamma + if tol.is_finite() { tol } else { 0.0 }
}

/// Index of the first delay from which the decay rate no longer rises.
///
/// Delays up to the last unmeasurable point are always discarded. With
/// [`TailPolicy::Strict`] the result is the smallest `i` such that every later
/// step is non-increasing within `slack·√(σ_j² + σ_{j+1}²)`. With
/// [`TailPolicy::FromPeak`] only the steps up to the largest rate are checked,
/// so noise wiggles in the flat tail cannot push the index to the end.
pub fn truncate_unphysical(points: &[FittedPoint], cfg: &TruncationConfig) -> Result<usize> {
    if points.len() < 2 {
        return Err(PipelineError::Truncation(format!("need at least 2 fitted delays, have {}", points.len())));
    }
    let start = points.iter().rposition(|p| !p.measurable).map_or(0, |i| i + 1);
    let n = points.len();
    if start >= n {
        return Err(PipelineError::Truncation("no measurable delay after the unmeasurable window".into()));
    }
    let end = match cfg.tail {
        TailPolicy::Strict => n - 1,
        TailPolicy::FromPeak => {
            let mut peak = start;
            for i in start + 1..n {
                if points[i].gamma > points[peak].gamma {
                    peak = i;
                }
            }
            peak
        }
    };
    let mut idx = end;
    while idx > start && within_slack(&points[idx - 1], &points[idx], cfg.slack) {
        idx -= 1;
    }
    let kept = n - idx;
    if kept < 2 && !cfg.allow_single_point {
        return Err(PipelineError::Truncation(format!(
            "no non-increasing suffix longer than one point (candidate index {idx} of {n})"
        )));
    }
    Ok(idx)
}

/// Fit all delays of a series and apply the truncation rule.
pub fn prepare_dataset(series: &RecoverySeries, cfg: &PipelineConfig) -> (Result<RecoveryDataset>, Vec<String>) {
    let (fitted, warnings) = fit_series_rates(&series.entries, cfg.truncation.max_rel_err);
    let ds = truncate_unphysical(&fitted, &cfg.truncation).map(|idx| RecoveryDataset {
        label: series.label.clone(),
        sweep: series.sweep,
        drive: series.drive,
        fitted,
        truncation_index: idx,
    });
    (ds, warnings)
}

/// Trapping-rate fit of one low-power dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappingRow {
    pub label: String,
    pub power: f64,
    pub s: f64,
    pub s_err: f64,
    pub x_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappingEstimate {
    pub s_mean: f64,
    /// Sample standard deviation across datasets.
    pub s_std: f64,
    pub rows: Vec<TrappingRow>,
    pub warnings: Vec<String>,
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_and_sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fit `s` with `r = 0` on every dataset below the power threshold and average.
pub fn estimate_trapping(
    dev: &DeviceParams,
    datasets: &[RecoveryDataset],
    cfg: &PipelineConfig,
) -> Result<TrappingEstimate> {
    let low: Vec<&RecoveryDataset> =
        datasets.iter().filter(|d| d.drive.power < cfg.low_power_threshold && d.drive.power > 0.0).collect();
    let fits: Vec<_> = low.par_iter().map(|d| (d, fit_trapping(dev, &d.usable(cfg.rate_floor_rel), 0.0))).collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (d, f) in fits {
        match f {
            Ok(f) if f.result.converged => {
                if f.x_in > cfg.low_power_xin_limit {
                    warnings.push(format!(
                        "{}: x_in = {:.3e} exceeds {:.1e} in the trapping-only regime",
                        d.label, f.x_in, cfg.low_power_xin_limit
                    ));
                }
                rows.push(TrappingRow {
                    label: d.label.clone(),
                    power: d.drive.power,
                    s: f.s,
                    s_err: f.s_err,
                    x_in: f.x_in,
                });
            }
            Ok(_) => warnings.push(format!("{}: trapping fit did not converge, excluded", d.label)),
            Err(e) => warnings.push(format!("{}: trapping fit failed ({e}), excluded", d.label)),
        }
    }
    if rows.len() < 2 {
        return Err(PipelineError::InsufficientData(format!(
            "trapping estimate needs at least 2 converged datasets below {:.3e} W, have {}",
            cfg.low_power_threshold,
            rows.len()
        )));
    }
    let s: Vec<f64> = rows.iter().map(|r| r.s).collect();
    let (s_mean, s_std) = mean_and_sample_std(&s);
    Ok(TrappingEstimate { s_mean, s_std, rows, warnings })
}

/// χ² profile of the recombination rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSweep {
    pub r_grid: Vec<f64>,
    /// Mean reduced χ² across the datasets that converged at each `r`
    /// (`None` if none did).
    pub chi2: Vec<Option<f64>>,
    pub n_excluded: Vec<usize>,
    pub r_best: f64,
    /// Largest grid `r` such that every grid point from 0 up to it stays within
    /// the flatness tolerance of `χ²(0)`.
    pub flat_range: f64,
    pub warnings: Vec<String>,
}

/// Refit every dataset at each grid `r` with `s` fixed; report the mean reduced χ².
pub fn chi2_sweep_r(
    dev: &DeviceParams,
    datasets: &[RecoveryDataset],
    s: f64,
    r_grid: &[f64],
    cfg: &PipelineConfig,
) -> Result<RSweep> {
    if r_grid.is_empty() || r_grid[0] != 0.0 || r_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PipelineError::Config("r grid must start at 0 and increase strictly".into()));
    }
    if datasets.is_empty() {
        return Err(PipelineError::InsufficientData("no datasets for the recombination sweep".into()));
    }
    let points: Vec<Vec<RatePoint>> = datasets.iter().map(|d| d.usable(cfg.rate_floor_rel)).collect();
    let per_r: Vec<Vec<Option<f64>>> = r_grid
        .par_iter()
        .map(|&r| {
            points
                .par_iter()
                .map(|pts| match fit_recovery(dev, pts, s, r) {
                    Ok(f) if f.result.converged => Some(f.result.reduced_chi2()),
                    _ => None,
                })
                .collect()
        })
        .collect();

    let mut warnings = Vec::new();
    let mut chi2 = Vec::with_capacity(r_grid.len());
    let mut n_excluded = Vec::with_capacity(r_grid.len());
    let mut total_excluded = 0;
    for (r, row) in r_grid.iter().zip(&per_r) {
        let ok: Vec<f64> = row.iter().flatten().copied().collect();
        let excl = row.len() - ok.len();
        if excl > 0 {
            let names: Vec<&str> =
                row.iter().zip(datasets).filter(|(v, _)| v.is_none()).map(|(_, d)| d.label.as_str()).collect();
            warnings.push(format!("r = {r:.3e}: excluded non-converged refits {names:?}"));
        }
        total_excluded += excl;
        n_excluded.push(excl);
        chi2.push((!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64));
    }
    let total = r_grid.len() * datasets.len();
    if total_excluded as f64 > cfg.max_exclusion_frac * total as f64 {
        return Err(PipelineError::SweepInvalid(format!(
            "{total_excluded} of {total} refits did not converge (limit {:.0}%)",
            100.0 * cfg.max_exclusion_frac
        )));
    }
    let Some(chi2_zero) = chi2[0] else {
        return Err(PipelineError::SweepInvalid("no converged refit at r = 0".into()));
    };
    let mut best = (0, chi2_zero);
    for (k, c) in chi2.iter().enumerate() {
        if let Some(c) = c {
            if *c < best.1 {
                best = (k, *c);
            }
        }
    }
    let best = best.0;
    let limit = (1.0 + cfg.flat_tolerance) * chi2_zero;
    let flat = chi2.iter().take_while(|c| c.is_some_and(|c| c <= limit)).count();
    Ok(RSweep {
        r_grid: r_grid.to_vec(),
        chi2,
        n_excluded,
        r_best: r_grid[best],
        flat_range: r_grid[flat - 1],
        warnings,
    })
}

/// Final recovery fit of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XinRow {
    pub label: String,
    pub position: Position,
    pub sweep: SweepKind,
    pub power: f64,
    pub pulse_len: f64,
    pub energy: f64,
    pub x_in: f64,
    pub x_in_err: f64,
    pub gamma0: f64,
    pub gamma0_err: f64,
    pub chi2_red: f64,
    pub n_used: usize,
    /// Departs from the low-power linear fit by more than the configured number of σ.
    pub saturated: bool,
}

/// Weighted straight line through the low-power `x_in(P)` points of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XinLinearFit {
    pub position: Position,
    pub pulse_len: f64,
    /// Density per W.
    pub slope: f64,
    pub slope_err: f64,
    pub intercept: f64,
    pub intercept_err: f64,
    pub cov_slope_intercept: f64,
    pub max_power: f64,
    pub n_points: usize,
}

impl XinLinearFit {
    pub fn predict(&self, power: f64) -> (f64, f64) {
        let v = power * power * self.slope_err.powi(2)
            + self.intercept_err.powi(2)
            + 2.0 * power * self.cov_slope_intercept;
        (self.slope * power + self.intercept, v.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XinTable {
    pub rows: Vec<XinRow>,
    pub linear_fits: Vec<XinLinearFit>,
    pub warnings: Vec<String>,
}

/// Fit `(x_in, Γ₀)` for every dataset at fixed `(s, r)`, then a weighted line
/// through the low-power part of each power sweep, flagging saturation.
pub fn extract_xin_vs_power(
    dev: &DeviceParams,
    datasets: &[RecoveryDataset],
    s: f64,
    r: f64,
    cfg: &PipelineConfig,
) -> XinTable {
    let fits: Vec<_> = datasets
        .par_iter()
        .map(|d| {
            let pts = d.usable(cfg.rate_floor_rel);
            (d, pts.len(), fit_recovery(dev, &pts, s, r))
        })
        .collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (d, n_used, f) in fits {
        match f {
            Ok(f) => {
                if !f.result.converged {
                    warnings.push(format!("{}: final recovery fit did not converge", d.label));
                }
                rows.push(XinRow {
                    label: d.label.clone(),
                    position: d.drive.position,
                    sweep: d.sweep,
                    power: d.drive.power,
                    pulse_len: d.drive.pulse_len,
                    energy: d.drive.energy(),
                    x_in: f.x_in,
                    x_in_err: f.x_in_err,
                    gamma0: f.gamma0,
                    gamma0_err: f.gamma0_err,
                    chi2_red: f.result.reduced_chi2(),
                    n_used,
                    saturated: false,
                });
            }
            Err(e) => warnings.push(format!("{}: final recovery fit failed ({e})", d.label)),
        }
    }

    let mut groups: Vec<(Position, f64)> =
        rows.iter().filter(|r| r.sweep == SweepKind::Power).map(|r| (r.position, r.pulse_len)).collect();
    groups.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    groups.dedup();
    let mut linear_fits = Vec::new();
    for (pos, len) in groups {
        let member = |r: &XinRow| r.sweep == SweepKind::Power && r.position == pos && r.pulse_len == len;
        let low: Vec<&XinRow> =
            rows.iter().filter(|r| member(r) && r.power <= cfg.linear_fit_max_power && r.x_in_err > 0.0).collect();
        if low.len() < 2 {
            warnings.push(format!("position {pos}, τ = {len:e} s: fewer than 2 points for the low-power line"));
            continue;
        }
        let x: Vec<f64> = low.iter().map(|r| r.power).collect();
        let y: Vec<f64> = low.iter().map(|r| r.x_in).collect();
        let sg: Vec<f64> = low.iter().map(|r| r.x_in_err).collect();
        match fit_linear_weighted(&x, &y, &sg) {
            Ok(lf) => {
                let fit = XinLinearFit {
                    position: pos,
                    pulse_len: len,
                    slope: lf.slope,
                    slope_err: lf.slope_err,
                    intercept: lf.intercept,
                    intercept_err: lf.intercept_err,
                    cov_slope_intercept: lf.result.covariance[0][1],
                    max_power: cfg.linear_fit_max_power,
                    n_points: low.len(),
                };
                for row in rows.iter_mut().filter(|r| member(r)) {
                    let (pred, pred_err) = fit.predict(row.power);
                    let tol = cfg.saturation_sigma * (row.x_in_err.powi(2) + pred_err.powi(2)).sqrt();
                    row.saturated = (row.x_in - pred).abs() > tol;
                }
                linear_fits.push(fit);
            }
            Err(e) => warnings.push(format!("position {pos}, τ = {len:e} s: low-power line failed ({e})")),
        }
    }
    XinTable { rows, linear_fits, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(g: &[f64], sigma: f64) -> Vec<FittedPoint> {
        g.iter().enumerate().map(|(i, g)| FittedPoint { tau: i as f64, gamma: *g, sigma, measurable: true }).collect()
    }

    fn strict() -> TruncationConfig {
        TruncationConfig { slack: 0.0, tail: TailPolicy::Strict, ..TruncationConfig::default() }
    }

    /// Smallest `i` whose suffix is non-increasing, by exhaustive check.
    fn brute(g: &[f64]) -> usize {
        (0..g.len()).find(|&i| g[i..].windows(2).all(|w| w[1] <= w[0])).unwrap()
    }

    #[test]
    fn truncation_examples() {
        let g = [5e5, 9e5, 7e5, 4e5, 2e5];
        assert_eq!(truncate_unphysical(&pts(&g, 0.0), &strict()).unwrap(), 1);
        assert_eq!(
            truncate_unphysical(&pts(&g, 0.0), &TruncationConfig { slack: 0.0, ..Default::default() }).unwrap(),
            1
        );
        assert_eq!(truncate_unphysical(&pts(&[4.0, 3.0, 2.0], 0.0), &strict()).unwrap(), 0);
        let up = pts(&[1.0, 2.0, 3.0], 0.0);
        assert!(truncate_unphysical(&up, &strict()).is_err());
        let single = TruncationConfig { allow_single_point: true, ..strict() };
        assert_eq!(truncate_unphysical(&up, &single).unwrap(), 2);
    }

    #[test]
    fn strict_rule_matches_brute_force() {
        let mut state = 12345u64;
        for _ in 0..500 {
            let g: Vec<f64> = (0..7)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 33) % 5) as f64
                })
                .collect();
            let want = brute(&g);
            let got = truncate_unphysical(&pts(&g, 0.0), &TruncationConfig { allow_single_point: true, ..strict() });
            assert_eq!(got.unwrap(), want, "{g:?}");
        }
    }

    #[test]
    fn unmeasurable_points_force_the_index() {
        let mut p = pts(&[9.0, 1.0, 8.0, 5.0, 3.0], 0.0);
        p[1].measurable = false;
        assert_eq!(truncate_unphysical(&p, &strict()).unwrap(), 2);
    }

    #[test]
    fn slack_absorbs_noise() {
        let p = pts(&[10.0, 6.0, 6.5, 3.0], 0.5);
        assert_eq!(
            truncate_unphysical(&p, &TruncationConfig { slack: 1.0, tail: TailPolicy::Strict, ..Default::default() })
                .unwrap(),
            0
        );
        assert_eq!(truncate_unphysical(&p, &strict()).unwrap(), 2);
    }

    #[test]
    fn from_peak_ignores_tail_wiggles() {
        let p = pts(&[1.0, 10.0, 6.0, 3.0, 1.0, 1.4, 1.0, 1.3], 0.05);
        let strict1 = TruncationConfig { slack: 1.0, tail: TailPolicy::Strict, ..Default::default() };
        assert!(truncate_unphysical(&p, &strict1).is_err());
        assert_eq!(truncate_unphysical(&p, &TruncationConfig::default()).unwrap(), 1);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_sample_std(&[8.0, 9.0, 10.0, 11.0, 7.0]);
        assert!((m - 9.0).abs() < 1e-12);
        assert!((s - 1.5811388300841898).abs() < 1e-12);
    }
}
