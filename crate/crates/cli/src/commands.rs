//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use qpdyn::fit::{fit_exponential, fit_ramsey};
use qpdyn::imaging::{locate_features, raster_image, FEATURE_THRESHOLD};
use qpdyn::model::{cw_gamma, CoherenceSet, OpticalDrive, Position};
use qpdyn::pipeline::{run_full, sha256_json, write_figures, write_report, PipelineReport, StageState, StageStatus};
use qpdyn::synth::{
    gen_campaign, gen_cw_sweep, gen_ef_rabi, gen_power_sweep, gen_pulselen_sweep, gen_ramsey_trace, gen_t1_trace,
    linspace, read_trace_csv, stream_id, write_atomic, write_trace_csv, Bundle, MeasurementTrace, Protocol,
    RecoveryDesign,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::RunConfig;
use crate::{CmdResult, Ctx, Failure, FitModel, SimProtocol};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    params: BTreeMap<String, String>,
    files: Vec<FileEntry>,
}

/// Write `manifest.json` listing every file under `out` (relative paths, sorted).
fn write_manifest(ctx: &Ctx, command: &str, params: BTreeMap<String, String>) -> anyhow::Result<()> {
    let mut files = Vec::new();
    for e in WalkDir::new(&ctx.out).sort_by_file_name() {
        let e = e?;
        if !e.file_type().is_file() || e.path() == ctx.out.join(MANIFEST) {
            continue;
        }
        let bytes = fs::read(e.path()).with_context(|| format!("reading {}", e.path().display()))?;
        let rel = e.path().strip_prefix(&ctx.out).unwrap_or(e.path());
        files.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let m = Manifest {
        tool: "qpdyn",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: ctx.cfg.seed,
        config_sha256: config_hash(&ctx.cfg),
        params,
        files,
    };
    write_atomic(&ctx.out.join(MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(())
}

/// Hash of the configuration without its output directory, so the same run
/// into two places gets the same manifest.
fn config_hash(cfg: &RunConfig) -> String {
    sha256_json(&RunConfig { out_dir: PathBuf::new(), ..cfg.clone() })
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn params<const N: usize>(kv: [(&str, String); N]) -> BTreeMap<String, String> {
    kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn drive_for(ctx: &Ctx, position: Position, power: f64, pulse_len: Option<f64>) -> CmdResult<OpticalDrive> {
    let block = ctx.cfg.drive.get(position);
    let drive = OpticalDrive {
        position,
        power,
        pulse_len: pulse_len.unwrap_or_else(|| block.pulse_s()),
        mu: block.mu_per_w(),
        lambda_shift: block.lambda_rad_s_per_nw / 1e-9,
    };
    drive.validate().map_err(usage)?;
    Ok(drive)
}

pub fn simulate(
    ctx: &Ctx,
    protocol: SimProtocol,
    position: Option<Position>,
    power: Option<f64>,
    pulse_len: Option<f64>,
) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let dev = cfg.device().map_err(Failure::Usage)?;
    let campaign = cfg.campaign().map_err(Failure::Usage)?;
    let seed = cfg.seed;
    let pos = position.unwrap_or(Position::A);
    let power = power.unwrap_or(1e-6);
    let noise = cfg.noise.model();
    let tr = &cfg.traces;
    let name = format!("{protocol:?}").to_lowercase();
    let mut p = params([("protocol", name.clone())]);
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;

    let text = |pos: Position| BTreeMap::from([("position".to_string(), pos.to_string())]);
    match protocol {
        SimProtocol::T1 | SimProtocol::Ramsey => {
            let drive = drive_for(ctx, pos, power, None)?;
            let gamma = cw_gamma(&dev, &drive).map_err(usage)?;
            let x = drive.cw_xqp();
            let trace = if protocol == SimProtocol::T1 {
                let times = linspace(0.0, tr.t1_span_decays / gamma, tr.t1_points);
                gen_t1_trace(&dev, x, &times, &noise, seed, stream_id(0, 0, 0))
            } else {
                let coh = CoherenceSet::compose(1.0 / gamma, cfg.cw.design(&cfg.noise).t_phi).map_err(usage)?;
                let times = linspace(0.0, tr.ramsey_span_t2 * coh.t2_star, tr.ramsey_points);
                let detune = tr.ramsey_detune_mhz.map_or(4.0 / coh.t2_star, |d| d * 1e6);
                gen_ramsey_trace(
                    &dev,
                    x,
                    cfg.cw.slope_scale,
                    coh.t2_star,
                    detune,
                    &times,
                    &noise,
                    seed,
                    stream_id(0, 0, 1),
                )
            }
            .map_err(usage)?;
            let mut trace = trace;
            trace.meta.insert("power_w".into(), power);
            trace.meta.insert("mu_per_w".into(), drive.mu);
            write_trace_csv(&ctx.out.join(format!("{name}_{pos}.csv")), &trace, &text(pos))?;
            p.insert("position".into(), pos.to_string());
            p.insert("power_w".into(), format!("{power:e}"));
        }
        SimProtocol::Recovery | SimProtocol::Pulselen => {
            let drive = drive_for(ctx, pos, power, pulse_len)?;
            let design = RecoveryDesign {
                s: campaign.s_per_s,
                r: campaign.r_per_s,
                map: campaign.map,
                delays: campaign.delays(),
                t1_times: campaign.t1_times(),
                noise,
            };
            let series = if protocol == SimProtocol::Recovery {
                gen_power_sweep(&dev, &design, &drive, &[power], seed, 0)
            } else {
                let lens = &campaign.pulsed[0].pulse_lens_s;
                if lens.is_empty() {
                    return Err(usage("recovery.pulse_lens_us is empty"));
                }
                gen_pulselen_sweep(&dev, &design, &drive, lens, seed, 0)
            }
            .map_err(usage)?;
            let mut bundle = Bundle::empty(seed);
            bundle.truth.insert("s_per_s".into(), design.s);
            bundle.truth.insert("r_per_s".into(), design.r);
            bundle.truth.insert("gamma0_per_s".into(), dev.gamma0);
            bundle.truth.insert(format!("mu_per_w:{pos}"), drive.mu);
            for s in &series {
                bundle.truth.insert(format!("x_in:{}", s.label), design.map.x_in(&s.drive).map_err(usage)?);
            }
            bundle.recovery = series;
            bundle.write_dir(&ctx.out)?;
            p.insert("position".into(), pos.to_string());
            p.insert("power_w".into(), format!("{power:e}"));
            p.insert("pulse_len_s".into(), format!("{:e}", drive.pulse_len));
        }
        SimProtocol::Cw => {
            let positions = match position {
                Some(p) => vec![p],
                None => cfg.cw.positions.clone(),
            };
            let design = cfg.cw.design(&cfg.noise);
            let mut bundle = Bundle::empty(seed);
            bundle.truth.insert("gamma0_per_s".into(), dev.gamma0);
            bundle.truth.insert("slope_scale".into(), design.slope_scale);
            for (k, &pos) in positions.iter().enumerate() {
                let plan = cfg.cw_plan(pos).map_err(Failure::Usage)?;
                bundle.truth.insert(format!("cw_mu_per_w:{pos}"), plan.mu_per_w);
                let drive = OpticalDrive::cw(pos, plan.powers_w[0], plan.mu_per_w);
                bundle.cw.push(
                    gen_cw_sweep(&dev, &drive, &plan.powers_w, &design, seed, stream_id(2, k, 0)).map_err(usage)?,
                );
            }
            bundle.write_dir(&ctx.out)?;
            let names: Vec<String> = positions.iter().map(ToString::to_string).collect();
            p.insert("positions".into(), names.join(","));
        }
        SimProtocol::EfRabi => {
            let amps = linspace(0.0, tr.ef_amp_max, tr.ef_points);
            let temp = tr.temp_mk / 1e3;
            for (j, (pi, file)) in [(false, "ef_rabi.csv"), (true, "ef_rabi_pi.csv")].into_iter().enumerate() {
                let trace = gen_ef_rabi(&dev, temp, pi, &amps, &noise, seed, stream_id(3, 0, j)).map_err(usage)?;
                write_trace_csv(&ctx.out.join(file), &trace, &BTreeMap::new())?;
            }
            p.insert("temp_k".into(), format!("{temp:e}"));
        }
        SimProtocol::Campaign => {
            let bundle = gen_campaign(&dev, &campaign, seed).map_err(usage)?;
            bundle.write_dir(&ctx.out)?;
        }
    }
    write_manifest(ctx, "simulate", p)?;
    info!("wrote {} ({name})", ctx.out.display());
    Ok(())
}

/// One file to fit and where its result goes, relative to `<out>/fits`.
struct FitJob {
    input: PathBuf,
    output: PathBuf,
}

fn collect_fit_jobs(paths: &[PathBuf]) -> anyhow::Result<Vec<FitJob>> {
    let mut jobs = Vec::new();
    for root in paths {
        if root.is_dir() {
            let base = root.file_name().map_or_else(|| PathBuf::from("input"), PathBuf::from);
            for e in WalkDir::new(root).sort_by_file_name() {
                let e = e?;
                if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "csv") {
                    let rel = e.path().strip_prefix(root).unwrap_or(e.path());
                    jobs.push(FitJob { input: e.path().to_path_buf(), output: base.join(rel).with_extension("json") });
                }
            }
        } else if root.is_file() {
            let stem = root.file_stem().map_or_else(|| PathBuf::from("input"), PathBuf::from);
            jobs.push(FitJob { input: root.clone(), output: stem.with_extension("json") });
        } else {
            bail!("no such file or directory: {}", root.display());
        }
    }
    Ok(jobs)
}

fn fit_one(path: &Path, model: FitModel) -> anyhow::Result<serde_json::Value> {
    let (trace, _) = read_trace_csv(path)?;
    let expected = match model {
        FitModel::Exponential => Protocol::T1Decay,
        FitModel::Ramsey => Protocol::Ramsey,
    };
    if trace.protocol != expected {
        bail!("{}: protocol {} does not match model {model:?}", path.display(), trace.protocol);
    }
    let head = |t: &MeasurementTrace| json!({ "file": path.display().to_string(), "protocol": t.protocol.to_string(), "seed": t.seed, "points": t.len() });
    let mut v = head(&trace);
    let body = match model {
        FitModel::Exponential => {
            let f = fit_exponential(&trace).with_context(|| path.display().to_string())?;
            json!({ "model": "exponential", "gamma_per_s": f.gamma, "gamma_err_per_s": f.gamma_err, "t1_s": 1.0 / f.gamma, "fit": f.result })
        }
        FitModel::Ramsey => {
            let f = fit_ramsey(&trace).with_context(|| path.display().to_string())?;
            json!({ "model": "ramsey", "t2_star_s": f.t2_star, "t2_star_err_s": f.t2_star_err, "detune_hz": f.detune, "detune_err_hz": f.detune_err, "fit": f.result })
        }
    };
    if let (Some(a), serde_json::Value::Object(b)) = (v.as_object_mut(), body) {
        a.extend(b);
    }
    Ok(v)
}

pub fn fit(ctx: &Ctx, model: FitModel, paths: &[PathBuf]) -> CmdResult<()> {
    let jobs = collect_fit_jobs(paths)?;
    if jobs.is_empty() {
        return Err(Failure::Runtime(anyhow!("no CSV files found")));
    }
    let results: Vec<anyhow::Result<serde_json::Value>> = jobs.par_iter().map(|j| fit_one(&j.input, model)).collect();
    let dir = ctx.out.join("fits");
    let mut failed = 0;
    for (job, res) in jobs.iter().zip(&results) {
        match res {
            Ok(v) => {
                let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.into()))?;
                write_atomic(&dir.join(&job.output), text.as_bytes())?;
                if jobs.len() == 1 {
                    println!("{text}");
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {e:#}");
            }
        }
    }
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    write_manifest(
        ctx,
        "fit",
        params([
            ("model", format!("{model:?}").to_lowercase()),
            ("inputs", names.join(",")),
            ("fitted", (jobs.len() - failed).to_string()),
            ("failed", failed.to_string()),
        ]),
    )?;
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} of {} files failed", jobs.len())));
    }
    Ok(())
}

/// `SOURCE_DATE_EPOCH` when set, so reports can be reproduced byte for byte.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

pub fn pipeline(ctx: &Ctx, bundle: &Path, r_grid: Option<Vec<f64>>, fixed_s_khz: Option<f64>) -> CmdResult<()> {
    let mut pcfg = ctx.cfg.pipeline().map_err(Failure::Usage)?;
    if let Some(g) = r_grid {
        pcfg.r_grid = g;
    }
    if let Some(s) = fixed_s_khz {
        pcfg.fixed_s = Some(s * 1e3);
    }
    pcfg.validate().map_err(usage)?;
    let (data, warnings) = Bundle::read_dir(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    for w in &warnings {
        warn!("{w}");
    }
    let mut rep = run_full(&pcfg, &data);
    if !warnings.is_empty() {
        rep.stages.insert(0, StageStatus { stage: "load".into(), state: StageState::Warning, messages: warnings });
    }
    rep.provenance.generated_unix_s = Some(timestamp());
    write_report(&rep, &ctx.out)?;
    write_manifest(
        ctx,
        "pipeline",
        params([
            ("bundle", bundle.display().to_string()),
            ("bundle_sha256", rep.provenance.bundle_sha256.clone()),
            ("pipeline_config_sha256", rep.provenance.config_sha256.clone()),
        ]),
    )?;
    for st in &rep.stages {
        println!("{:<14} {:?}", st.stage, st.state);
        for m in &st.messages {
            println!("    {m}");
        }
    }
    if let Some(s) = rep.s_used {
        println!("s = {:.1} Hz{}", s.value, s.err.map_or_else(|| " (fixed)".to_string(), |e| format!(" ± {e:.1} Hz")));
    }
    if let Some(r) = rep.r_used {
        println!("r = {:e} s^-1", r.value);
    }
    if !rep.ok {
        return Err(Failure::Runtime(anyhow!(
            "analysis did not complete; see {}",
            ctx.out.join("report.json").display()
        )));
    }
    Ok(())
}

pub fn image(ctx: &Ctx, no_pad: bool) -> CmdResult<()> {
    let sc = &ctx.cfg.scene;
    let mut scene = sc.geometry().map_err(Failure::Usage)?;
    if no_pad {
        scene.pad = None;
    }
    let beam = sc.beam().map_err(Failure::Usage)?;
    let grid = sc.grid().map_err(Failure::Usage)?;
    let img = raster_image(&scene, &beam, &grid).map_err(usage)?;
    write_atomic(&ctx.out.join("image.csv"), img.to_csv().as_bytes())?;
    write_atomic(&ctx.out.join("image.pgm"), &img.to_pgm())?;
    let features = locate_features(&img, sc.c_offset_um / 1e6);
    if let Ok(f) = &features {
        let doc = json!({
            "units": "m",
            "threshold": FEATURE_THRESHOLD,
            "features": f,
            "scene": scene,
            "beam": beam,
            "grid": grid,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Runtime(e.into()))?;
        write_atomic(&ctx.out.join("features.json"), text.as_bytes())?;
        for (name, p) in [("A", f.a), ("B", f.b), ("C", f.c)] {
            println!("{name}: x = {:.2} um, y = {:.2} um", p.x * 1e6, p.y * 1e6);
        }
    }
    write_manifest(ctx, "image", params([("no_pad", no_pad.to_string())]))?;
    features.map(|_| ()).map_err(|e| Failure::Runtime(e.into()))
}

pub fn report(ctx: &Ctx, path: &Path) -> CmdResult<()> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rep: PipelineReport = serde_json::from_str(&src).with_context(|| format!("parsing {}", path.display()))?;
    let files = write_figures(&rep, &ctx.out)?;
    write_manifest(ctx, "report", params([("report", path.display().to_string())]))?;
    info!("wrote {} figure tables", files.len());
    Ok(())
}
