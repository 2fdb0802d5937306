//! Report serialization and the per-figure CSV tables.
//!
//! Every table is derived from the [`PipelineReport`] alone, so re-rendering an
//! existing `report.json` reproduces the same files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{PipelineReport, Result};
use crate::model::{qp_coupling, recovery_rate};
use crate::synth::write_atomic;

pub const FIGURE_FILES: [&str; 8] =
    ["fig2a.csv", "fig2b.csv", "fig2c.csv", "fig2d.csv", "fig3b.csv", "fig3d.csv", "fig4.csv", "chi2_profile.csv"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

/// Γ(P) per CW position, with the P axis rescaled onto position C's.
fn fig2a(rep: &PipelineReport) -> String {
    let mut s = String::from("position,power_w,scaled_power_w,gamma_per_s,gamma_err_per_s\n");
    for a in &rep.cw {
        let scale = rep.collapse.iter().find(|c| c.position == a.position).map_or(1.0, |c| c.ratio);
        for r in &a.rows {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", a.position, r.power, r.power * scale, r.gamma, r.gamma_err);
        }
    }
    s
}

/// Conversion constants and their ratios.
fn fig2b(rep: &PipelineReport) -> String {
    let mut s =
        String::from("position,mu_per_w,mu_err_per_w,gamma0_per_s,gamma0_err_per_s,reference,ratio,ratio_err\n");
    for a in &rep.cw {
        let c = rep.collapse.iter().find(|c| c.position == a.position);
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{},{},{}",
            a.position,
            a.mu,
            a.mu_err,
            a.gamma0,
            a.gamma0_err,
            c.map_or_else(String::new, |c| c.reference.to_string()),
            opt(c.map(|c| c.ratio)),
            opt(c.map(|c| c.ratio_err)),
        );
    }
    s
}

/// Coherence times and the dephasing split.
fn fig2c(rep: &PipelineReport) -> String {
    let mut s = String::from("position,power_w,t1_s,t2_star_s,t2_star_err_s,t_phi_s,t2_ratio,infeasible\n");
    for a in &rep.cw {
        for r in &a.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{},{:e},{}",
                a.position,
                r.power,
                r.t1,
                r.t2_star,
                r.t2_star_err,
                opt(r.t_phi),
                r.t2_ratio,
                r.infeasible
            );
        }
    }
    s
}

/// Frequency shift with the fitted and theory lines evaluated at each power.
fn fig2d(rep: &PipelineReport) -> String {
    let mut s = String::from("position,power_w,shift_rad_s,shift_err_rad_s,fit_rad_s,theory_rad_s\n");
    for a in &rep.cw {
        let w0 = a.rows.iter().map(|r| r.shift - a.shift_slope * r.power).sum::<f64>() / a.rows.len().max(1) as f64;
        for r in &a.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e}",
                a.position,
                r.power,
                r.shift,
                r.shift_err,
                w0 + a.shift_slope * r.power,
                a.theory_slope * r.power
            );
        }
    }
    s
}

/// Γ(τ_opt) per dataset with the final model curve where available.
fn fig3b(rep: &PipelineReport) -> String {
    let mut s = String::from(
        "label,position,sweep,power_w,pulse_len_s,tau_opt_s,gamma_per_s,sigma_per_s,measurable,used,model_per_s\n",
    );
    let c = qp_coupling(&rep.config.device);
    let rates = rep.s_used.zip(rep.r_used).map(|(s, r)| (s.value, r.value));
    for d in &rep.datasets {
        let row = rep.injection.as_ref().and_then(|t| t.rows.iter().find(|r| r.label == d.label));
        for (i, p) in d.fitted.iter().enumerate() {
            let model = match (rates, row) {
                (Some((sv, rv)), Some(row)) => Some(recovery_rate(c, row.gamma0, sv, rv, row.x_in, p.tau)),
                _ => None,
            };
            let sweep =
                serde_json::to_value(d.sweep).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{},{},{}",
                d.label,
                d.drive.position,
                sweep,
                d.drive.power,
                d.drive.pulse_len,
                p.tau,
                p.gamma,
                p.sigma,
                p.measurable,
                i >= d.truncation_index,
                opt(model)
            );
        }
    }
    s
}

/// Injected density versus power with the low-power linear fit.
fn fig3d(rep: &PipelineReport) -> String {
    let mut s = String::from(
        "label,position,power_w,pulse_len_s,x_in,x_in_err,gamma0_per_s,gamma0_err_per_s,chi2_red,n_used,saturated,linear_fit,linear_fit_err\n",
    );
    let Some(t) = &rep.injection else { return s };
    for r in t.rows.iter().filter(|r| r.sweep == crate::synth::SweepKind::Power) {
        let fit = t.linear_fits.iter().find(|f| f.position == r.position && f.pulse_len == r.pulse_len);
        let pred = fit.map(|f| f.predict(r.power));
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{}",
            r.label,
            r.position,
            r.power,
            r.pulse_len,
            r.x_in,
            r.x_in_err,
            r.gamma0,
            r.gamma0_err,
            r.chi2_red,
            r.n_used,
            r.saturated,
            opt(pred.map(|p| p.0)),
            opt(pred.map(|p| p.1))
        );
    }
    s
}

fn fig4(rep: &PipelineReport) -> String {
    let mut s = String::from("position,energy_j,x_in,x_in_err,source,label\n");
    let Some(m) = &rep.energy else { return s };
    for r in &m.rows {
        let source =
            serde_json::to_value(r.source).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{:e},{:e},{},{}", r.position, r.energy, r.x_in, r.x_in_err, source, r.label);
    }
    s
}

fn chi2_profile(rep: &PipelineReport) -> String {
    let mut s = String::from("r_per_s,mean_reduced_chi2,n_excluded\n");
    let Some(sw) = &rep.recombination else { return s };
    for ((r, c), n) in sw.r_grid.iter().zip(&sw.chi2).zip(&sw.n_excluded) {
        let _ = writeln!(s, "{r:e},{},{n}", opt(*c));
    }
    s
}

/// Render all figure tables as `(file name, contents)`.
pub fn render_figures(rep: &PipelineReport) -> Vec<(&'static str, String)> {
    let bodies = [fig2a(rep), fig2b(rep), fig2c(rep), fig2d(rep), fig3b(rep), fig3d(rep), fig4(rep), chi2_profile(rep)];
    FIGURE_FILES.into_iter().zip(bodies).collect()
}

pub fn write_figures(rep: &PipelineReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (name, body) in render_figures(rep) {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Write `report.json` and the figure tables into `dir`.
pub fn write_report(rep: &PipelineReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join("report.json");
    write_atomic(&path, rep.to_json().as_bytes())?;
    let mut out = vec![path];
    out.extend(write_figures(rep, dir)?);
    Ok(out)
}
