//! A complete measurement campaign: recovery series plus CW sweeps.
//!
//! On disk a bundle is a directory holding `bundle.json` and, mirroring it, one
//! CSV per trace (`recovery/<label>/tau_<nnn>.csv`) and one CSV per CW position
//! (`cw/<position>.csv`). Reading prefers `bundle.json` and falls back to the
//! CSV tree, so externally produced CSV data can be analysed directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{parse_header_line, read_trace_csv, trace_to_csv_string, write_atomic};
use super::{MeasurementTrace, Result, SynthError};
use crate::model::{OpticalDrive, Position};

pub const BUNDLE_SCHEMA: &str = "qpdyn-bundle/1";
const CW_COLUMNS: &str = "power_w,t1_s,t2_star_s,shift_rad_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepKind {
    /// Fixed pulse length, varied power.
    Power,
    /// Fixed power, varied pulse length.
    PulseLength,
}

impl SweepKind {
    fn as_str(self) -> &'static str {
        match self {
            SweepKind::Power => "power",
            SweepKind::PulseLength => "pulse_length",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "power" => Some(SweepKind::Power),
            "pulse_length" => Some(SweepKind::PulseLength),
            _ => None,
        }
    }
}

/// T1 trace measured `tau_opt` seconds after the optical pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub tau_opt: f64,
    pub trace: MeasurementTrace,
}

/// All delays recorded for one pulse setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySeries {
    pub label: String,
    pub sweep: SweepKind,
    pub drive: OpticalDrive,
    pub entries: Vec<RecoveryEntry>,
}

/// Repeated coherence measurements at one CW power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwPoint {
    /// Optical power, W.
    pub power: f64,
    pub t1: Vec<f64>,
    pub t2_star: Vec<f64>,
    /// Qubit angular-frequency shift relative to the dark qubit, rad/s.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwDataset {
    pub position: Position,
    pub seed: u64,
    pub points: Vec<CwPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub schema: String,
    pub seed: u64,
    pub recovery: Vec<RecoverySeries>,
    pub cw: Vec<CwDataset>,
    /// Generating parameters, when known (SI units; key names carry the unit).
    #[serde(default)]
    pub truth: BTreeMap<String, f64>,
}

impl Bundle {
    pub fn empty(seed: u64) -> Self {
        Self { schema: BUNDLE_SCHEMA.to_string(), seed, recovery: Vec::new(), cw: Vec::new(), truth: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.recovery.is_empty() && self.cw.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(src)?;
        if b.schema != BUNDLE_SCHEMA {
            return Err(SynthError::Invalid(format!(
                "unsupported bundle schema '{}' (expected '{BUNDLE_SCHEMA}')",
                b.schema
            )));
        }
        Ok(b)
    }

    /// Write `bundle.json` and the CSV mirror under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("bundle.json"), self.to_json()?.as_bytes())?;
        for series in &self.recovery {
            for (j, entry) in series.entries.iter().enumerate() {
                let mut trace = entry.trace.clone();
                trace.meta.insert("tau_opt_s".into(), entry.tau_opt);
                trace.meta.insert("power_w".into(), series.drive.power);
                trace.meta.insert("pulse_len_s".into(), series.drive.pulse_len);
                trace.meta.insert("mu_per_w".into(), series.drive.mu);
                let text = BTreeMap::from([
                    ("series".to_string(), series.label.clone()),
                    ("position".to_string(), series.drive.position.to_string()),
                    ("sweep".to_string(), series.sweep.as_str().to_string()),
                ]);
                let path = dir.join("recovery").join(&series.label).join(format!("tau_{j:03}.csv"));
                write_atomic(&path, trace_to_csv_string(&trace, &text).as_bytes())?;
            }
        }
        for ds in &self.cw {
            let path = dir.join("cw").join(format!("{}.csv", ds.position));
            write_atomic(&path, cw_to_csv(ds).as_bytes())?;
        }
        Ok(())
    }

    /// Load a bundle directory (or a bare `bundle.json` path).
    ///
    /// From a CSV tree, files that fail to parse are skipped and reported in
    /// the returned warnings; everything else is kept.
    pub fn read_dir(path: &Path) -> Result<(Self, Vec<String>)> {
        let io_err = |p: &Path, source| SynthError::Io { path: p.display().to_string(), source };
        let json = if path.is_file() { path.to_path_buf() } else { path.join("bundle.json") };
        if json.is_file() {
            let src = fs::read_to_string(&json).map_err(|e| io_err(&json, e))?;
            return Ok((Self::from_json(&src)?, Vec::new()));
        }
        if !path.is_dir() {
            return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such bundle")));
        }
        let mut warnings = Vec::new();
        let mut bundle = Bundle::empty(0);
        let mut series: BTreeMap<String, RecoverySeries> = BTreeMap::new();
        for file in csv_files(&path.join("recovery"))? {
            match read_trace_csv(&file).and_then(|(t, text)| entry_from_csv(&file, t, text)) {
                Ok((label, s, entry)) => {
                    series.entry(label).or_insert(RecoverySeries { entries: Vec::new(), ..s }).entries.push(entry)
                }
                Err(e) => warnings.push(format!("skipped {}: {e}", file.display())),
            }
        }
        for mut s in series.into_values() {
            s.entries.sort_by(|a, b| a.tau_opt.total_cmp(&b.tau_opt));
            bundle.recovery.push(s);
        }
        for file in csv_files(&path.join("cw"))? {
            let src = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
            match cw_from_csv(&src, &file.display().to_string()) {
                Ok(ds) => bundle.cw.push(ds),
                Err(e) => warnings.push(format!("skipped {}: {e}", file.display())),
            }
        }
        bundle.cw.sort_by_key(|d| d.position);
        if bundle.is_empty() && warnings.is_empty() {
            warnings.push(format!("no bundle.json or CSV data under {}", path.display()));
        }
        Ok((bundle, warnings))
    }
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let rd = fs::read_dir(&d).map_err(|source| SynthError::Io { path: d.display().to_string(), source })?;
        for e in rd {
            let p = e.map_err(|source| SynthError::Io { path: d.display().to_string(), source })?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn entry_from_csv(
    file: &Path,
    mut trace: MeasurementTrace,
    text: BTreeMap<String, String>,
) -> Result<(String, RecoverySeries, RecoveryEntry)> {
    let missing =
        |k: &str| SynthError::Parse { path: file.display().to_string(), line: 0, msg: format!("missing '{k}' header") };
    let label = text.get("series").cloned().ok_or_else(|| missing("series"))?;
    let position: Position =
        text.get("position").ok_or_else(|| missing("position"))?.parse().map_err(SynthError::Model)?;
    let sweep = text.get("sweep").and_then(|s| SweepKind::parse(s)).unwrap_or(SweepKind::Power);
    let mut take = |k: &str| trace.meta.remove(k).ok_or_else(|| missing(k));
    let tau_opt = take("tau_opt_s")?;
    let power = take("power_w")?;
    let pulse_len = take("pulse_len_s")?;
    let mu = trace.meta.remove("mu_per_w").unwrap_or(0.0);
    let drive = OpticalDrive { position, power, pulse_len, mu, lambda_shift: 0.0 };
    let s = RecoverySeries { label: label.clone(), sweep, drive, entries: Vec::new() };
    Ok((label, s, RecoveryEntry { tau_opt, trace }))
}

fn cw_to_csv(ds: &CwDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# protocol=CwPowerSweep");
    let _ = writeln!(out, "# seed={}", ds.seed);
    let _ = writeln!(out, "# position={}", ds.position);
    out.push_str(CW_COLUMNS);
    out.push('\n');
    for p in &ds.points {
        for k in 0..p.t1.len() {
            let _ = writeln!(out, "{:e},{:e},{:e},{:e}", p.power, p.t1[k], p.t2_star[k], p.shift[k]);
        }
    }
    out
}

fn cw_from_csv(src: &str, path: &str) -> Result<CwDataset> {
    let err = |line: usize, msg: String| SynthError::Parse { path: path.to_string(), line, msg };
    let mut position = None;
    let mut seed = 0;
    let mut saw_columns = false;
    let mut points: Vec<CwPoint> = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            let (k, v) = parse_header_line(line).ok_or_else(|| err(lineno, "expected '# key=value'".into()))?;
            match k.as_str() {
                "position" => position = Some(v.parse::<Position>().map_err(|e| err(lineno, e.to_string()))?),
                "seed" => seed = v.parse().map_err(|_| err(lineno, format!("bad seed '{v}'")))?,
                "protocol" if v == "CwPowerSweep" => {}
                "protocol" => return Err(err(lineno, format!("expected CwPowerSweep, got '{v}'"))),
                _ => {}
            }
            continue;
        }
        if !saw_columns {
            if line.replace(' ', "") != CW_COLUMNS {
                return Err(err(lineno, format!("expected column header '{CW_COLUMNS}'")));
            }
            saw_columns = true;
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(lineno, format!("malformed row '{line}'")))?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(err(lineno, format!("expected 4 finite fields in '{line}'")));
        }
        match points.last_mut() {
            Some(p) if p.power == vals[0] => {
                p.t1.push(vals[1]);
                p.t2_star.push(vals[2]);
                p.shift.push(vals[3]);
            }
            _ => {
                points.push(CwPoint { power: vals[0], t1: vec![vals[1]], t2_star: vec![vals[2]], shift: vec![vals[3]] })
            }
        }
    }
    let position = position.ok_or_else(|| err(1, "missing '# position=' header".into()))?;
    Ok(CwDataset { position, seed, points })
}
