//! Overlay of power and pulse-length sweeps on a common pulse-energy axis.

use serde::{Deserialize, Serialize};

use crate::model::Position;
use crate::pipeline::recovery::XinRow;
use crate::synth::SweepKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub position: Position,
    /// Pulse energy, J.
    pub energy: f64,
    pub x_in: f64,
    pub x_in_err: f64,
    pub source: SweepKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyMerge {
    /// Sorted by position, then energy, then source.
    pub rows: Vec<EnergyRow>,
    /// Largest `|x_len − x_pow| / x_pow` over length-sweep points inside the
    /// power sweep's energy range, with `x_pow` log-log interpolated. `None`
    /// when no position has overlapping ranges.
    pub max_discrepancy: Option<f64>,
    pub warnings: Vec<String>,
}

/// Log-log interpolation of `(energy, x)` pairs sorted by energy.
fn interp_loglog(curve: &[(f64, f64)], e: f64) -> Option<f64> {
    let k = curve.partition_point(|(ce, _)| *ce < e);
    if k < curve.len() && curve[k].0 == e {
        return Some(curve[k].1);
    }
    if k == 0 || k == curve.len() {
        return None;
    }
    let (e0, x0) = curve[k - 1];
    let (e1, x1) = curve[k];
    if !(x0 > 0.0 && x1 > 0.0 && e0 > 0.0) {
        return Some(x0 + (x1 - x0) * (e - e0) / (e1 - e0));
    }
    let w = (e / e0).ln() / (e1 / e0).ln();
    Some((x0.ln() + w * (x1 / x0).ln()).exp())
}

pub fn merge_by_energy(power_rows: &[XinRow], length_rows: &[XinRow]) -> EnergyMerge {
    let to_row = |r: &XinRow, source| EnergyRow {
        position: r.position,
        energy: r.energy,
        x_in: r.x_in,
        x_in_err: r.x_in_err,
        source,
        label: r.label.clone(),
    };
    let mut rows: Vec<EnergyRow> = power_rows
        .iter()
        .map(|r| to_row(r, SweepKind::Power))
        .chain(length_rows.iter().map(|r| to_row(r, SweepKind::PulseLength)))
        .collect();
    rows.sort_by(|a, b| {
        a.position
            .cmp(&b.position)
            .then(a.energy.total_cmp(&b.energy))
            .then(a.source.cmp(&b.source))
            .then(a.label.cmp(&b.label))
    });

    let mut warnings = Vec::new();
    let mut max_discrepancy: Option<f64> = None;
    let mut positions: Vec<Position> = rows.iter().map(|r| r.position).collect();
    positions.dedup();
    for pos in positions {
        let curve: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.position == pos && r.source == SweepKind::Power && r.energy > 0.0)
            .map(|r| (r.energy, r.x_in))
            .collect();
        let lengths: Vec<&EnergyRow> =
            rows.iter().filter(|r| r.position == pos && r.source == SweepKind::PulseLength).collect();
        if curve.is_empty() || lengths.is_empty() {
            continue;
        }
        let mut overlap = false;
        for r in lengths {
            if let Some(x) = interp_loglog(&curve, r.energy) {
                overlap = true;
                let d = (r.x_in - x).abs() / x.abs().max(f64::MIN_POSITIVE);
                max_discrepancy = Some(max_discrepancy.map_or(d, |m: f64| m.max(d)));
            }
        }
        if !overlap {
            warnings.push(format!("position {pos}: power and pulse-length sweeps cover disjoint energies"));
        }
    }
    EnergyMerge { rows, max_discrepancy, warnings }
}
