//! Seeded synthetic measurements for every protocol of the optical-injection
//! experiment.
//!
//! Every generator takes a `(seed, stream)` pair and draws its noise from a
//! ChaCha stream keyed by both, so batches generated in parallel agree with a
//! serial run bit for bit.

mod bundle;
mod campaign;
mod io;
mod protocols;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use bundle::{Bundle, CwDataset, CwPoint, RecoveryEntry, RecoverySeries, SweepKind, BUNDLE_SCHEMA};
pub use campaign::{gen_campaign, CampaignConfig, CwPlan, PulsedPlan, REFERENCE_MU};
pub use io::{read_trace_csv, trace_from_csv_str, trace_to_csv_string, write_atomic, write_trace_csv};
pub use protocols::*;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid generator input: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    T1Decay,
    Ramsey,
    RecoverySweep,
    CwPowerSweep,
    PulseLenSweep,
    EfRabi,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Protocol::T1Decay => "T1Decay",
            Protocol::Ramsey => "Ramsey",
            Protocol::RecoverySweep => "RecoverySweep",
            Protocol::CwPowerSweep => "CwPowerSweep",
            Protocol::PulseLenSweep => "PulseLenSweep",
            Protocol::EfRabi => "EfRabi",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Protocol {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "T1Decay" => Protocol::T1Decay,
            "Ramsey" => Protocol::Ramsey,
            "RecoverySweep" => Protocol::RecoverySweep,
            "CwPowerSweep" => Protocol::CwPowerSweep,
            "PulseLenSweep" => Protocol::PulseLenSweep,
            "EfRabi" => Protocol::EfRabi,
            other => return Err(SynthError::Invalid(format!("unknown protocol '{other}'"))),
        })
    }
}

/// One measured curve.
///
/// `sigma` is the declared per-point standard deviation. It is populated from
/// the noise model even when no noise was drawn, so noiseless traces can still
/// be fitted with meaningful weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTrace {
    pub protocol: Protocol,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    pub seed: u64,
    /// Snapshot of the generating parameters (SI units, key names carry the unit).
    #[serde(default)]
    pub meta: BTreeMap<String, f64>,
}

impl MeasurementTrace {
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(SynthError::Invalid("empty trace".into()));
        }
        if self.values.len() != n || self.sigma.len() != n {
            return Err(SynthError::Invalid("times, values and sigma lengths differ".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SynthError::Invalid("times must be strictly increasing".into()));
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(SynthError::Invalid("non-finite sample".into()));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SynthError::Invalid("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Gaussian noise on averaged populations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Single-shot readout standard deviation.
    pub sigma_read: f64,
    /// Averages per point.
    pub n_avg: u32,
    /// When false the declared sigma is kept but no noise is drawn.
    pub enabled: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma_read: 0.1, n_avg: 100, enabled: true }
    }
}

impl NoiseModel {
    pub fn new(sigma_read: f64, n_avg: u32) -> Self {
        Self { sigma_read, n_avg, enabled: true }
    }

    pub fn off(self) -> Self {
        Self { enabled: false, ..self }
    }

    pub fn effective_sigma(&self) -> f64 {
        self.sigma_read / f64::from(self.n_avg).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_read > 0.0 && self.sigma_read.is_finite()) || self.n_avg == 0 {
            return Err(SynthError::Invalid("noise needs sigma_read > 0 and n_avg >= 1".into()));
        }
        Ok(())
    }
}

/// Relative repetition noise for CW sweeps (parameter-level, ten repeats per point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwNoise {
    /// Relative deviation of a single T1 estimate.
    pub t1_rel: f64,
    /// Relative deviation of a single T2* estimate.
    pub t2_rel: f64,
    /// Absolute deviation of a single frequency estimate, Hz.
    pub freq_hz: f64,
    pub repeats: usize,
    pub enabled: bool,
}

impl Default for CwNoise {
    fn default() -> Self {
        Self { t1_rel: 0.03, t2_rel: 0.03, freq_hz: 2e3, repeats: 10, enabled: true }
    }
}

/// Deterministic noise stream for task `stream` of a run seeded with `seed`.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sigma
}

/// `n` points evenly spaced over `[start, stop]`.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n).map(|i| start + (stop - start) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `n` points evenly spaced in log over `[start, stop]` (both positive).
pub fn logspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    linspace(start.ln(), stop.ln(), n).into_iter().map(f64::exp).collect()
}
