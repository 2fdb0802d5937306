mod common;

use common::{brute_force_truncation, rel};
use proptest::prelude::*;
use qpdyn::fit::fit_recovery;
use qpdyn::model::{gamma_recovery, DeviceParams, OpticalDrive, Position, QpDynamics};
use qpdyn::pipeline::{
    analyze_cw, chi2_sweep_r, collapse_ratios, collapse_residual, prepare_dataset, run_full, truncate_unphysical,
    FittedPoint, PipelineConfig, RecoveryDataset, StageState, TailPolicy, TruncationConfig,
};
use qpdyn::synth::{
    gen_campaign, gen_cw_sweep, gen_recovery_sweep, linspace, Bundle, CampaignConfig, CwDesign, CwNoise, InjectionMap,
    NoiseModel, RecoverySeries, SweepKind,
};

fn dev() -> DeviceParams {
    DeviceParams::reference()
}

fn small_campaign() -> CampaignConfig {
    let mut cfg = CampaignConfig { n_delays: 41, ..CampaignConfig::default() };
    cfg.pulsed[0].powers_w = vec![1e-9, 5e-9, 20e-9, 60e-9, 300e-9, 2e-6];
    cfg.pulsed[0].pulse_lens_s.truncate(2);
    for c in &mut cfg.cw {
        c.powers_w = qpdyn::synth::logspace(c.powers_w[0], c.powers_w[15], 6);
    }
    cfg
}

fn cheap_pipeline() -> PipelineConfig {
    PipelineConfig { r_grid: qpdyn::pipeline::default_r_grid(2e4, 2e7, 12), ..PipelineConfig::default() }
}

/// Dataset built directly from exact model rates with 1% errors.
fn exact_dataset(label: &str, x_in: f64, s: f64, r: f64, delays: &[f64]) -> RecoveryDataset {
    let dev = dev();
    let d = QpDynamics::from_steady_state(s, r, dev.background_xqp(), x_in).unwrap();
    let g = gamma_recovery(&dev, &d, delays).unwrap();
    RecoveryDataset {
        label: label.into(),
        sweep: SweepKind::Power,
        drive: OpticalDrive { pulse_len: 10e-6, ..OpticalDrive::cw(Position::A, x_in / 1750.0, 1750.0) },
        fitted: delays
            .iter()
            .zip(g)
            .map(|(t, g)| FittedPoint { tau: *t, gamma: g, sigma: 0.01 * g, measurable: true })
            .collect(),
        truncation_index: 0,
    }
}

#[test]
fn report_is_idempotent() {
    let bundle = gen_campaign(&dev(), &small_campaign(), 3).unwrap();
    let cfg = cheap_pipeline();
    let a = run_full(&cfg, &bundle);
    let b = run_full(&cfg, &bundle);
    assert!(a.ok, "{:?}", a.stages);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn dataset_order_does_not_matter() {
    let bundle = gen_campaign(&dev(), &small_campaign(), 4).unwrap();
    let mut shuffled = bundle.clone();
    shuffled.recovery.reverse();
    shuffled.recovery.rotate_left(3);
    shuffled.cw.reverse();
    for s in &mut shuffled.recovery {
        s.entries.reverse();
    }
    let cfg = cheap_pipeline();
    let a = run_full(&cfg, &bundle);
    let mut b = run_full(&cfg, &shuffled);
    // only the input hash may differ
    assert_ne!(a.provenance.bundle_sha256, b.provenance.bundle_sha256);
    b.provenance.bundle_sha256 = a.provenance.bundle_sha256.clone();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn noiseless_trapping_estimate_has_no_spread() {
    let cfg = CampaignConfig { noise: NoiseModel::default().off(), ..small_campaign() };
    let bundle = gen_campaign(&dev(), &cfg, 1).unwrap();
    let rep = run_full(&PipelineConfig { r_grid: vec![0.0], ..PipelineConfig::default() }, &bundle);
    let t = rep.trapping.expect("trapping estimate");
    assert!(t.rows.len() >= 2);
    assert!(t.s_std <= 1e-6 * 9e3, "s_std {}", t.s_std);
    assert!(rel(t.s_mean, 9e3) < 1e-6, "s_mean {}", t.s_mean);
}

#[test]
fn noiseless_chi2_profile_rises_from_zero() {
    let delays = linspace(50e-6, 1e-3, 10);
    let sets: Vec<_> = [1e-5, 1e-4, 1e-3]
        .iter()
        .enumerate()
        .map(|(k, x)| exact_dataset(&format!("p{k}"), *x, 9e3, 0.0, &delays))
        .collect();
    let grid = qpdyn::pipeline::default_r_grid(2e4, 2e7, 50);
    let sweep = chi2_sweep_r(&dev(), &sets, 9e3, &grid, &PipelineConfig::default()).unwrap();
    let chi2: Vec<f64> = sweep.chi2.iter().map(|c| c.unwrap()).collect();
    assert_eq!(sweep.r_best, 0.0);
    for w in chi2.windows(2) {
        assert!(w[1] >= w[0], "{chi2:?}");
    }
}

#[test]
fn strong_recombination_is_located() {
    let delays = linspace(20e-6, 1e-3, 40);
    let sets: Vec<_> = [1e-4, 1e-3, 1e-2]
        .iter()
        .enumerate()
        .map(|(k, x)| exact_dataset(&format!("p{k}"), *x, 9e3, 1e7, &delays))
        .collect();
    let grid = qpdyn::pipeline::default_r_grid(2e4, 2e7, 50);
    let sweep = chi2_sweep_r(&dev(), &sets, 9e3, &grid, &PipelineConfig::default()).unwrap();
    assert!(sweep.r_best >= 5e6 && sweep.r_best <= 2e7, "r_best {}", sweep.r_best);
    let at = |r: f64| sweep.chi2[sweep.r_grid.iter().position(|g| *g == r).unwrap()].unwrap();
    assert!(at(sweep.r_best) < 1e-3 * at(0.0));
}

#[test]
fn single_point_grid_is_trapping_only() {
    let delays = linspace(50e-6, 1e-3, 10);
    let sets = vec![exact_dataset("a", 1e-4, 9e3, 0.0, &delays), exact_dataset("b", 1e-3, 9e3, 0.0, &delays)];
    let sweep = chi2_sweep_r(&dev(), &sets, 9e3, &[0.0], &PipelineConfig::default()).unwrap();
    assert_eq!((sweep.r_best, sweep.flat_range), (0.0, 0.0));
    assert!(chi2_sweep_r(&dev(), &sets, 9e3, &[1e4], &PipelineConfig::default()).is_err());
}

#[test]
fn noiseless_cw_curves_collapse() {
    let design = CwDesign { noise: CwNoise { enabled: false, ..CwNoise::default() }, ..CwDesign::default() };
    let cfg = PipelineConfig::default();
    let mus = [(Position::A, 1750.0), (Position::B, 16100.0), (Position::C, 29.6)];
    let analyses: Vec<_> = mus
        .iter()
        .enumerate()
        .map(|(k, &(pos, mu))| {
            let powers = qpdyn::synth::logspace(1e-6 / mu, 1e-3 / mu, 16);
            let ds = gen_cw_sweep(&dev(), &OpticalDrive::cw(pos, 0.0, mu), &powers, &design, 1, k as u64).unwrap();
            analyze_cw(&dev(), &ds, &cfg).unwrap()
        })
        .collect();
    let c = analyses.iter().find(|a| a.position == Position::C).unwrap();
    let powers = qpdyn::synth::logspace(1e-7, 1e-3, 40);
    for a in &analyses {
        assert!(collapse_residual(&dev(), a.mu, c.mu, &powers).unwrap() <= 1e-10);
    }
    let ratios = collapse_ratios(&analyses);
    let get = |p| ratios.iter().find(|r| r.position == p).unwrap().ratio;
    assert!(rel(get(Position::A), 1750.0 / 29.6) < 1e-9);
    assert!(rel(get(Position::B), 16100.0 / 29.6) < 1e-9);
}

#[test]
fn dense_injection_is_truncated_on_a_linear_t1_grid() {
    let dev = dev();
    let d = QpDynamics::from_steady_state(9e3, 0.0, dev.background_xqp(), 1e-2).unwrap();
    let drive = OpticalDrive { pulse_len: 10e-6, ..OpticalDrive::cw(Position::A, 5.7e-6, 1750.0) };
    let entries = gen_recovery_sweep(
        &dev,
        &d,
        &drive,
        &linspace(0.0, 2e-3, 81),
        &linspace(0.0, 50e-6, 101),
        &NoiseModel::default(),
        9,
        0,
    )
    .unwrap();
    let series = RecoverySeries { label: "dense".into(), sweep: SweepKind::Power, drive, entries };
    let (ds, _) = prepare_dataset(&series, &PipelineConfig::default());
    let ds = ds.unwrap();
    assert!(ds.truncation_index > 0);
    assert!(ds.fitted[ds.truncation_index].tau >= 300e-6, "first usable delay {}", ds.fitted[ds.truncation_index].tau);
}

#[test]
fn zero_injection_fits_zero_within_errors() {
    let dev = dev();
    let d = QpDynamics::from_steady_state(9e3, 0.0, dev.background_xqp(), 0.0).unwrap();
    let drive = OpticalDrive { pulse_len: 10e-6, ..OpticalDrive::cw(Position::A, 0.0, 1750.0) };
    let t1 = CampaignConfig::default().t1_times();
    let entries =
        gen_recovery_sweep(&dev, &d, &drive, &linspace(0.0, 1e-3, 81), &t1, &NoiseModel::default(), 2, 0).unwrap();
    let series = RecoverySeries { label: "dark".into(), sweep: SweepKind::Power, drive, entries };
    let cfg = PipelineConfig::default();
    let ds = prepare_dataset(&series, &cfg).0.unwrap();
    let f = fit_recovery(&dev, &ds.usable(cfg.rate_floor_rel), 9e3, 0.0).unwrap();
    assert!(f.x_in <= 2.0 * f.x_in_err, "x_in {} ± {}", f.x_in, f.x_in_err);
}

#[test]
fn plateau_in_the_injection_map_is_flagged() {
    let mut cfg = small_campaign();
    // the knee sits above the low-power window that defines the linear reference
    let knee = 2e-4;
    cfg.map = InjectionMap::Piecewise { tau_ref: 10e-6, knee_x: knee, plateau_factor: 20.0, resume_slope: 0.3 };
    cfg.pulsed[0].powers_w = vec![1e-9, 3e-9, 10e-9, 30e-9, 60e-9, 300e-9, 1e-6, 3e-6];
    cfg.pulsed[0].pulse_lens_s.clear();
    cfg.cw.clear();
    let bundle = gen_campaign(&dev(), &cfg, 5).unwrap();
    let rep = run_full(&PipelineConfig { r_grid: vec![0.0], ..PipelineConfig::default() }, &bundle);
    let rows = &rep.injection.expect("final fits").rows;
    for row in rows {
        let linear = 1750.0 * row.power;
        if linear > 2.0 * knee {
            assert!(row.saturated, "{} at {:e} W not flagged", row.label, row.power);
        } else if row.power <= 100e-9 {
            assert!(!row.saturated, "{} at {:e} W flagged", row.label, row.power);
        }
    }
}

#[test]
fn corrupted_trace_is_reported_and_skipped() {
    let mut bundle = gen_campaign(&dev(), &small_campaign(), 6).unwrap();
    bundle.recovery[0].entries[5].trace.values[3] = f64::NAN;
    let label = bundle.recovery[0].label.clone();
    let rep = run_full(&cheap_pipeline(), &bundle);
    let trunc = rep.stage("truncation").unwrap();
    assert_eq!(trunc.state, StageState::Warning);
    assert!(trunc.messages.iter().any(|m| m.starts_with(&label) && m.contains("dropped")), "{:?}", trunc.messages);
    let ds = rep.datasets.iter().find(|d| d.label == label).unwrap();
    assert_eq!(ds.fitted.len(), bundle.recovery[0].entries.len() - 1);
}

#[test]
fn empty_bundle_runs_nothing() {
    let rep = run_full(&PipelineConfig::default(), &Bundle::empty(0));
    assert!(!rep.ok);
    assert!(rep.stages.iter().all(|s| s.state == StageState::Skipped), "{:?}", rep.stages);
}

fn points() -> impl Strategy<Value = Vec<FittedPoint>> {
    prop::collection::vec((1e3..1e7f64, 0.0..0.1f64, prop::bool::weighted(0.9)), 2..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (g, e, m))| FittedPoint { tau: i as f64 * 1e-5, gamma: g, sigma: e * g, measurable: m })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn downstream_never_sees_truncated_points(pts in points(), slack in 0.0..2.0f64, strict in any::<bool>()) {
        let cfg = TruncationConfig {
            slack,
            allow_single_point: true,
            tail: if strict { TailPolicy::Strict } else { TailPolicy::FromPeak },
            ..TruncationConfig::default()
        };
        if let Ok(idx) = truncate_unphysical(&pts, &cfg) {
            prop_assert!(idx < pts.len());
            prop_assert!(pts[..idx].iter().all(|p| p.tau < pts[idx].tau));
            prop_assert!(pts[idx..].iter().all(|p| p.measurable));
            let ds = RecoveryDataset {
                label: "x".into(),
                sweep: SweepKind::Power,
                drive: OpticalDrive::cw(Position::A, 1e-9, 1750.0),
                fitted: pts.clone(),
                truncation_index: idx,
            };
            prop_assert!(ds.usable(1e-3).iter().all(|p| p.tau >= pts[idx].tau));
        }
    }

    #[test]
    fn strict_rule_matches_exhaustive_search(g in prop::collection::vec(1e3..1e7f64, 2..30)) {
        let pts: Vec<FittedPoint> = g
            .iter()
            .enumerate()
            .map(|(i, g)| FittedPoint { tau: i as f64, gamma: *g, sigma: 0.0, measurable: true })
            .collect();
        let cfg = TruncationConfig { slack: 0.0, allow_single_point: true, tail: TailPolicy::Strict, ..TruncationConfig::default() };
        prop_assert_eq!(truncate_unphysical(&pts, &cfg).ok(), brute_force_truncation(&g));
    }
}

#[test]
fn refits_of_noiseless_campaign_data_all_converge() {
    let mut cfg = CampaignConfig::golden();
    cfg.noise = cfg.noise.off();
    cfg.cw.clear();
    let p = &mut cfg.pulsed[0];
    p.powers_w = vec![p.powers_w[8], p.powers_w[11]];
    p.pulse_lens_s.truncate(1);
    let bundle = gen_campaign(&dev(), &cfg, 1).unwrap();
    let pc = PipelineConfig::default();
    for series in &bundle.recovery {
        let ds = prepare_dataset(series, &pc).0.unwrap();
        let pts = ds.usable(pc.rate_floor_rel);
        // r = 0 starts at the exact answer; the large values are far from the truth
        for r in [0.0, 2.096e6, 1.31e7] {
            let f = fit_recovery(&dev(), &pts, cfg.s_per_s, r).unwrap();
            assert!(f.result.converged, "{} r={r}: {} iterations", ds.label, f.result.n_iter);
        }
    }
}
