//! Quasiparticle-limited coherence of superconducting qubits.
//!
//! The crate is split along the data flow of an optical-injection experiment:
//!
//! * [`model`] evaluates the closed-form physics: quasiparticle-induced decay,
//!   trapping/recombination recovery, CW conversion, frequency pull, dephasing
//!   bookkeeping and thermometry.
//! * [`synth`] produces seeded synthetic measurements for every protocol.
//! * [`fit`] is a weighted Levenberg-Marquardt engine plus the concrete model fits.
//! * [`pipeline`] turns trace bundles into trapping/recombination estimates,
//!   injected densities, conversion constants and a JSON report.
//! * [`imaging`] simulates raster transmission scans and locates the beam positions.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fit;
pub mod imaging;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use model::{CoherenceSet, DeviceParams, OpticalDrive, Position, QpDynamics};
