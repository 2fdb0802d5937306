use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const QUICK: &str = "seed = 7
[recovery]
n_delays = 31
n_t1 = 30
powers_nw = [1.0, 5.0, 20.0, 60.0, 300.0, 2000.0]
pulse_lens_us = [2.0, 10.0]
[cw]
n_powers = 8
[pipeline]
n_r = 12
";

fn qpdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpdyn"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Scratch {
    dir: TempDir,
    config: PathBuf,
}

impl Scratch {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("quick.toml");
        fs::write(&config, QUICK).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        let mut all = vec!["--config", s(&self.config), "--out", s(&out)];
        all.extend_from_slice(args);
        qpdyn(&all)
    }

    fn campaign(&self, out: &str) -> PathBuf {
        let o = self.run(out, &["simulate", "--protocol", "campaign"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path(out)
    }
}

#[test]
fn simulation_is_reproducible_across_output_directories() {
    let sc = Scratch::new();
    let a = sc.campaign("a");
    let b = sc.campaign("b");
    let ma = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("manifest.json")).unwrap());
    assert!(ma.contains("bundle.json"));
    let other = sc.run("c", &["--seed", "8", "simulate", "--protocol", "campaign"]);
    assert_eq!(code(&other), 0);
    assert_ne!(ma, fs::read_to_string(sc.path("c").join("manifest.json")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&qpdyn(&["simulate", "--protocol", "nonsense"])), 2);
    assert_eq!(code(&qpdyn(&["frobnicate"])), 2);
    assert_eq!(code(&qpdyn(&["--threads", "0", "image"])), 2);
}

#[test]
fn config_parse_error_names_file_and_line() {
    let sc = Scratch::new();
    let bad = sc.path("bad.toml");
    fs::write(&bad, "seed = 1\n[recovery]\nn_delays = \"many\"\n").unwrap();
    let o = qpdyn(&["--config", s(&bad), "image"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("bad.toml") && err.contains("line 3"), "{err}");

    fs::write(&bad, "[recovery]\nn_delayz = 3\n").unwrap();
    let o = qpdyn(&["--config", s(&bad), "image"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_delayz"));
}

#[test]
fn fitting_a_directory_writes_one_result_per_file() {
    let sc = Scratch::new();
    for pos in ["A", "B", "C"] {
        let o = sc.run("traces", &["simulate", "--protocol", "t1", "--position", pos, "--power", "1e-8"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = sc.run("fit", &["fit", "--model", "exponential", s(&sc.path("traces"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for pos in ["A", "B", "C"] {
        let text = fs::read_to_string(sc.path("fit").join(format!("fits/traces/t1_{pos}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["gamma_per_s"].as_f64().unwrap() > 0.0);
        assert_eq!(v["fit"]["converged"], true);
    }

    // the wrong model for the data is a failure of the run, not of usage
    let o = sc.run("fit2", &["fit", "--model", "ramsey", s(&sc.path("traces").join("t1_A.csv"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn malformed_csv_error_names_file_and_line() {
    let sc = Scratch::new();
    let o = sc.run("traces", &["simulate", "--protocol", "t1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let good = fs::read_to_string(sc.path("traces").join("t1_A.csv")).unwrap();
    let mut lines: Vec<&str> = good.lines().collect();
    let bad_line = lines.len() - 2;
    lines[bad_line] = "1e-6,not-a-number,0.01";
    let bad = sc.path("broken.csv");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = sc.run("fit", &["fit", "--model", "exponential", s(&bad)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains(&format!("broken.csv:{}", bad_line + 1)), "{err}");
}

#[test]
fn zero_recombination_grid_gives_trapping_only_analysis() {
    let sc = Scratch::new();
    let bundle = sc.campaign("bundle");
    let o = sc.run("report", &["pipeline", s(&bundle), "--r-grid", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sc.path("report").join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["r_used"]["value"].as_f64(), Some(0.0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("r = 0e0"));
}

#[test]
fn missing_bundle_exits_with_one() {
    let sc = Scratch::new();
    let o = sc.run("report", &["pipeline", s(&sc.path("nowhere"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn image_without_pad_has_no_features() {
    let sc = Scratch::new();
    let ok = sc.run("img", &["image"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(sc.path("img").join("features.json").is_file());
    let o = sc.run("nopad", &["image", "--no-pad"]);
    assert_eq!(code(&o), 1);
    // the raster itself is still written
    assert!(sc.path("nopad").join("image.pgm").is_file());
    assert!(!sc.path("nopad").join("features.json").exists());
}

#[test]
fn report_re_renders_identical_tables() {
    let sc = Scratch::new();
    let bundle = sc.campaign("bundle");
    let o = sc.run("first", &["pipeline", s(&bundle)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sc.run("second", &["report", s(&sc.path("first").join("report.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut n = 0;
    for e in fs::read_dir(sc.path("second")).unwrap() {
        let name = e.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        let a = fs::read(sc.path("first").join(&name)).unwrap();
        let b = fs::read(sc.path("second").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
        n += 1;
    }
    assert!(n >= 8, "only {n} tables");

    // and the analysis itself is reproducible with a pinned timestamp
    let o = sc.run("third", &["pipeline", s(&bundle)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(sc.path("first").join("report.json")).unwrap(),
        fs::read(sc.path("third").join("report.json")).unwrap()
    );
}
