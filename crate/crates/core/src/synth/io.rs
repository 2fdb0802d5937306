//! Trace CSV format.
//!
//! ```text
//! # protocol=T1Decay
//! # seed=42
//! # tau_opt_s=0.0001
//! time_s,value,sigma
//! 0,1,0.01
//! ...
//! ```
//!
//! Header lines start with `#` and hold `key=value` pairs. `protocol` and `seed`
//! are required; `series`, `position` and `sweep` are kept as text, every other
//! key must be numeric and lands in [`MeasurementTrace::meta`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MeasurementTrace, Protocol, Result, SynthError};

pub(crate) const TEXT_KEYS: [&str; 3] = ["series", "position", "sweep"];
const COLUMNS: &str = "time_s,value,sigma";

/// Render a trace; `text` adds string-valued header keys.
pub fn trace_to_csv_string(trace: &MeasurementTrace, text: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# protocol={}", trace.protocol);
    let _ = writeln!(out, "# seed={}", trace.seed);
    for (k, v) in text {
        let _ = writeln!(out, "# {k}={v}");
    }
    for (k, v) in &trace.meta {
        let _ = writeln!(out, "# {k}={v:e}");
    }
    out.push_str(COLUMNS);
    out.push('\n');
    for ((t, v), s) in trace.times.iter().zip(&trace.values).zip(&trace.sigma) {
        let _ = writeln!(out, "{t:e},{v:e},{s:e}");
    }
    out
}

pub(crate) fn parse_header_line(line: &str) -> Option<(String, String)> {
    let body = line.trim_start_matches('#').trim();
    let (k, v) = body.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

/// Parse a trace; `path` is only used for error messages.
pub fn trace_from_csv_str(src: &str, path: &str) -> Result<(MeasurementTrace, BTreeMap<String, String>)> {
    let err = |line: usize, msg: String| SynthError::Parse { path: path.to_string(), line, msg };
    let mut protocol = None;
    let mut seed = None;
    let mut meta = BTreeMap::new();
    let mut text = BTreeMap::new();
    let mut saw_columns = false;
    let (mut times, mut values, mut sigma) = (Vec::new(), Vec::new(), Vec::new());

    for (idx, raw) in src.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if saw_columns {
                return Err(err(lineno, "metadata after the column header".into()));
            }
            let (k, v) =
                parse_header_line(line).ok_or_else(|| err(lineno, format!("expected '# key=value', got '{line}'")))?;
            match k.as_str() {
                "protocol" => protocol = Some(v.parse::<Protocol>().map_err(|e| err(lineno, e.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| err(lineno, format!("bad seed '{v}'")))?),
                k if TEXT_KEYS.contains(&k) => {
                    text.insert(k.to_string(), v);
                }
                _ => {
                    let num =
                        v.parse::<f64>().map_err(|_| err(lineno, format!("metadata '{k}' is not numeric: '{v}'")))?;
                    meta.insert(k, num);
                }
            }
            continue;
        }
        if !saw_columns {
            if line.replace(' ', "") != COLUMNS {
                return Err(err(lineno, format!("expected column header '{COLUMNS}', got '{line}'")));
            }
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        let mut parsed = [0.0; 3];
        for (slot, f) in parsed.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| err(lineno, format!("not a number: '{f}'")))?;
        }
        times.push(parsed[0]);
        values.push(parsed[1]);
        sigma.push(parsed[2]);
    }
    if !saw_columns {
        return Err(err(src.lines().count().max(1), "missing column header".into()));
    }
    let protocol = protocol.ok_or_else(|| err(1, "missing '# protocol=' header".into()))?;
    let seed = seed.ok_or_else(|| err(1, "missing '# seed=' header".into()))?;
    let trace = MeasurementTrace { protocol, times, values, sigma, seed, meta };
    trace.validate().map_err(|e| SynthError::Parse { path: path.to_string(), line: 0, msg: e.to_string() })?;
    Ok((trace, text))
}

pub fn write_trace_csv(path: &Path, trace: &MeasurementTrace, text: &BTreeMap<String, String>) -> Result<()> {
    write_atomic(path, trace_to_csv_string(trace, text).as_bytes())
}

pub fn read_trace_csv(path: &Path) -> Result<(MeasurementTrace, BTreeMap<String, String>)> {
    let src = fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
    trace_from_csv_str(&src, &path.display().to_string())
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| SynthError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
