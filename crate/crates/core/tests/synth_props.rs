mod common;

use common::rel;
use proptest::prelude::*;
use qpdyn::fit::{fit_exponential, fit_ramsey, fit_recovery, RatePoint};
use qpdyn::model::{decay_rate, DeviceParams, OpticalDrive, Position, QpDynamics};
use qpdyn::synth::{
    gen_campaign, gen_cw_sweep, gen_power_sweep, gen_ramsey_trace, gen_recovery_sweep, gen_t1_trace, linspace,
    t1_trace_for_rate, trace_from_csv_str, trace_to_csv_string, CampaignConfig, CwDesign, CwNoise, InjectionMap,
    NoiseModel, RecoveryDesign,
};

fn dev() -> DeviceParams {
    DeviceParams::reference()
}

fn small_campaign() -> CampaignConfig {
    let mut cfg = CampaignConfig { n_delays: 11, n_t1: 20, ..CampaignConfig::default() };
    cfg.pulsed[0].powers_w.truncate(3);
    cfg.pulsed[0].pulse_lens_s.truncate(2);
    for c in &mut cfg.cw {
        c.powers_w.truncate(4);
    }
    cfg
}

#[test]
fn campaign_is_bit_identical_for_equal_seeds_and_any_thread_count() {
    let cfg = small_campaign();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gen_campaign(&dev(), &cfg, 7).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = gen_campaign(&dev(), &cfg, 8).unwrap();
    assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
}

#[test]
fn readout_noise_has_the_declared_deviation() {
    let noise = NoiseModel::new(0.1, 100);
    let times = linspace(0.0, 50e-6, 20_000);
    let gamma = 1e5;
    let tr = t1_trace_for_rate(gamma, &times, &noise, 3, 0).unwrap();
    let n = times.len() as f64;
    let resid: Vec<f64> = times.iter().zip(&tr.values).map(|(t, v)| v - (-gamma * t).exp()).collect();
    let mean = resid.iter().sum::<f64>() / n;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let want = 0.1 / 10.0;
    assert!((sd / want - 1.0).abs() < 0.2, "sd {sd} vs {want}");
    assert!(mean.abs() < 5.0 * want / n.sqrt());
    assert!(tr.sigma.iter().all(|s| *s == want));
}

#[test]
fn csv_round_trip_is_exact() {
    let times = linspace(0.0, 50e-6, 41);
    let tr = t1_trace_for_rate(1.23e5, &times, &NoiseModel::default(), 11, 5).unwrap();
    let text = trace_to_csv_string(&tr, &Default::default());
    let (back, _) = trace_from_csv_str(&text, "mem.csv").unwrap();
    assert_eq!(back, tr);
}

#[test]
fn noiseless_t1_trace_round_trips() {
    let times = linspace(0.0, 60e-6, 101);
    for x in [0.0, 1e-7, 1e-6, 3e-6] {
        let tr = gen_t1_trace(&dev(), x, &times, &NoiseModel::default().off(), 1, 0).unwrap();
        let fit = fit_exponential(&tr).unwrap();
        let want = decay_rate(&dev(), x).unwrap();
        assert!(rel(fit.gamma, want) < 1e-6, "x={x}: {} vs {want}", fit.gamma);
    }
}

#[test]
fn noiseless_ramsey_trace_round_trips() {
    let times = linspace(0.0, 30e-6, 301);
    let t2 = 8e-6;
    for (x, detune) in [(0.0, 1e6), (1e-7, 1.5e6), (1e-6, 3e6)] {
        let tr = gen_ramsey_trace(&dev(), x, 0.83, t2, detune, &times, &NoiseModel::default().off(), 1, 0).unwrap();
        let fit = fit_ramsey(&tr).unwrap();
        assert!(rel(fit.t2_star, t2) < 1e-6);
        assert!(rel(fit.detune, tr.meta["detune_hz"]) < 1e-6);
    }
}

#[test]
fn noiseless_recovery_series_round_trips() {
    let dev = dev();
    let t1 = {
        let mut t = vec![0.0];
        t.extend(common::logspace(4e-9, 60e-6, 60));
        t
    };
    let delays = linspace(100e-6, 1e-3, 31);
    let drive = OpticalDrive { pulse_len: 10e-6, ..OpticalDrive::cw(Position::A, 10e-9, 1750.0) };
    for x_in in [1e-6, 1e-5, 1e-4] {
        let d = QpDynamics::from_steady_state(9e3, 0.0, dev.background_xqp(), x_in).unwrap();
        let entries = gen_recovery_sweep(&dev, &d, &drive, &delays, &t1, &NoiseModel::default().off(), 1, 0).unwrap();
        let pts: Vec<RatePoint> = entries
            .iter()
            .map(|e| {
                let f = fit_exponential(&e.trace).unwrap();
                RatePoint { tau: e.tau_opt, gamma: f.gamma, sigma: f.gamma_err.max(1e-6 * f.gamma) }
            })
            .collect();
        let fit = fit_recovery(&dev, &pts, 9e3, 0.0).unwrap();
        assert!(rel(fit.x_in, x_in) < 1e-6, "{} vs {x_in}", fit.x_in);
        assert!(rel(fit.gamma0, dev.gamma0) < 1e-6);
    }
}

#[test]
fn noiseless_cw_sweep_has_no_spread() {
    let design = CwDesign { noise: CwNoise { enabled: false, ..CwNoise::default() }, ..CwDesign::default() };
    let drive = OpticalDrive::cw(Position::B, 0.0, 1.61e4);
    let ds = gen_cw_sweep(&dev(), &drive, &[1e-9, 1e-8, 1e-7], &design, 1, 0).unwrap();
    for p in &ds.points {
        assert!(p.t1.windows(2).all(|w| w[0] == w[1]));
        assert!(p.t2_star.iter().zip(&p.t1).all(|(t2, t1)| *t2 <= 2.0 * t1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equal_pulse_energy_gives_identical_series(p in 1e-10..1e-5f64, tau in 1e-7..1e-4f64, k in -3i32..4) {
        let design = RecoveryDesign {
            s: 9e3,
            r: 1e5,
            map: InjectionMap::default(),
            delays: linspace(0.0, 1e-3, 9),
            t1_times: linspace(0.0, 50e-6, 21),
            noise: NoiseModel::default().off(),
        };
        let scale = 2f64.powi(k);
        let d1 = OpticalDrive { pulse_len: tau, ..OpticalDrive::cw(Position::A, 0.0, 1750.0) };
        let d2 = OpticalDrive { pulse_len: tau / scale, ..d1 };
        let a = gen_power_sweep(&dev(), &design, &d1, &[p], 5, 0).unwrap();
        let b = gen_power_sweep(&dev(), &design, &d2, &[p * scale], 5, 0).unwrap();
        prop_assert_eq!(&a[0].entries, &b[0].entries);
    }

    #[test]
    fn traces_are_deterministic_per_stream(seed in any::<u64>(), stream in any::<u64>(), gamma in 1e3..1e7f64) {
        let times = linspace(0.0, 20e-6, 17);
        let a = t1_trace_for_rate(gamma, &times, &NoiseModel::default(), seed, stream).unwrap();
        let b = t1_trace_for_rate(gamma, &times, &NoiseModel::default(), seed, stream).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.validate().is_ok());
    }
}
