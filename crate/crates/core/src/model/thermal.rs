//! Thermal quasiparticle density and two-level qubit thermometry.

use std::f64::consts::PI;

use super::{DeviceParams, ModelError, Result, BOLTZMANN, PLANCK};

/// Equilibrium density `√(2π·k_B·T/Δ)·exp(−Δ/k_B·T)`.
pub fn thermal_xqp(dev: &DeviceParams, temp: f64) -> Result<f64> {
    if !(temp >= 0.0) || !temp.is_finite() {
        return Err(ModelError::Domain(format!("temperature must be non-negative, got {temp}")));
    }
    if temp == 0.0 {
        return Ok(0.0);
    }
    let kt = BOLTZMANN * temp;
    let ratio = dev.gap_energy() / kt;
    Ok((2.0 * PI / ratio).sqrt() * (-ratio).exp())
}

/// `h·f_q / k_B`, K.
fn qubit_temperature_scale(dev: &DeviceParams) -> f64 {
    PLANCK * dev.f_q / BOLTZMANN
}

/// Boltzmann excited-state population of a two-level qubit at `temp`.
pub fn excited_population(dev: &DeviceParams, temp: f64) -> Result<f64> {
    if !(temp >= 0.0) || !temp.is_finite() {
        return Err(ModelError::Domain(format!("temperature must be non-negative, got {temp}")));
    }
    if temp == 0.0 {
        return Ok(0.0);
    }
    let a = qubit_temperature_scale(dev) / temp;
    // e^{-a}/(1+e^{-a}) without overflow for small temperatures
    Ok(1.0 / (1.0 + a.exp()))
}

/// Effective temperature from the excited-state population.
pub fn thermometry(dev: &DeviceParams, p_e: f64) -> Result<f64> {
    if !(p_e > 0.0) {
        return Err(ModelError::Domain(format!("population must be positive, got {p_e}")));
    }
    if p_e >= 0.5 {
        return Err(ModelError::NonThermal(p_e));
    }
    let a = ((1.0 - p_e) / p_e).ln();
    Ok(qubit_temperature_scale(dev) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn thermal_density_table_values() {
        let dev = DeviceParams::reference();
        let x165 = thermal_xqp(&dev, 0.165).unwrap();
        assert!((x165 / 7.8e-7 - 1.0).abs() < 0.10, "x_th(165 mK) = {x165:e}");
        assert_relative_eq!(x165, 8.077e-7, max_relative = 1e-3);
        let x160 = thermal_xqp(&dev, 0.160).unwrap();
        assert!((5e-7..6e-7).contains(&x160), "x_th(160 mK) = {x160:e}");
        assert_eq!(thermal_xqp(&dev, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn thermal_density_increases_with_temperature() {
        let dev = DeviceParams::reference();
        let mut prev = 0.0;
        for i in 1..200 {
            let x = thermal_xqp(&dev, i as f64 * 5e-3).unwrap();
            assert!(x > prev);
            prev = x;
        }
    }

    #[test]
    fn population_examples() {
        let dev = DeviceParams::reference();
        let p = excited_population(&dev, 0.3).unwrap();
        assert_relative_eq!(p, 0.2674, max_relative = 1e-3);
        let t = thermometry(&dev, 0.191).unwrap();
        assert_relative_eq!(t, 0.2095, max_relative = 1e-3);
    }

    #[test]
    fn thermometry_errors() {
        let dev = DeviceParams::reference();
        assert!(matches!(thermometry(&dev, 0.5), Err(ModelError::NonThermal(_))));
        assert!(matches!(thermometry(&dev, 0.0), Err(ModelError::Domain(_))));
        assert!(matches!(thermometry(&dev, -0.1), Err(ModelError::Domain(_))));
    }

    #[test]
    fn thermometry_inverts_population() {
        let dev = DeviceParams::reference();
        for i in 0..=90 {
            let temp = 0.05 + i as f64 * 5e-3;
            let back = thermometry(&dev, excited_population(&dev, temp).unwrap()).unwrap();
            assert_relative_eq!(back, temp, max_relative = 1e-9);
        }
    }
}
