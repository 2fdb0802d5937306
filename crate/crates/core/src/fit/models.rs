//! Parametric models with analytic gradients.

use std::f64::consts::PI;

use super::engine::Model;
use crate::model::recovery_point;

/// `A·e^{−Γt} + B`, parameters `[A, Γ, B]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpDecay;

impl Model for ExpDecay {
    fn n_params(&self) -> usize {
        3
    }
    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[0] * (-p[1] * t).exp() + p[2]
    }
    fn gradient(&self, t: f64, p: &[f64], g: &mut [f64]) {
        let e = (-p[1] * t).exp();
        g[0] = e;
        g[1] = -p[0] * t * e;
        g[2] = 1.0;
    }
}

/// `A·e^{−Γt}`, parameters `[A, Γ]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpDecayNoOffset;

impl Model for ExpDecayNoOffset {
    fn n_params(&self) -> usize {
        2
    }
    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[0] * (-p[1] * t).exp()
    }
    fn gradient(&self, t: f64, p: &[f64], g: &mut [f64]) {
        let e = (-p[1] * t).exp();
        g[0] = e;
        g[1] = -p[0] * t * e;
    }
}

/// `A·e^{−t/T₂}·cos(2πft + φ) + B`, parameters `[A, T₂, f, φ, B]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DampedCosine;

impl Model for DampedCosine {
    fn n_params(&self) -> usize {
        5
    }
    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[0] * (-t / p[1]).exp() * (2.0 * PI * p[2] * t + p[3]).cos() + p[4]
    }
    fn gradient(&self, t: f64, p: &[f64], g: &mut [f64]) {
        let env = (-t / p[1]).exp();
        let arg = 2.0 * PI * p[2] * t + p[3];
        let (sin, cos) = arg.sin_cos();
        g[0] = env * cos;
        g[1] = p[0] * env * cos * t / (p[1] * p[1]);
        g[2] = -p[0] * env * sin * 2.0 * PI * t;
        g[3] = -p[0] * env * sin;
        g[4] = 1.0;
    }
}

/// `a·x + b`, parameters `[a, b]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Affine;

impl Model for Affine {
    fn n_params(&self) -> usize {
        2
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * x + p[1]
    }
    fn gradient(&self, x: f64, _p: &[f64], g: &mut [f64]) {
        g[0] = x;
        g[1] = 1.0;
    }
}

/// Recovery of the decay rate with fixed trapping and recombination rates;
/// parameters `[x_in, Γ₀]`, abscissa is the delay after the pulse.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryModel {
    pub coupling: f64,
    pub s: f64,
    pub r: f64,
}

impl Model for RecoveryModel {
    fn n_params(&self) -> usize {
        2
    }
    fn eval(&self, tau: f64, p: &[f64]) -> f64 {
        recovery_point(self.coupling, p[1], self.s, self.r, p[0], tau).gamma
    }
    fn gradient(&self, tau: f64, p: &[f64], g: &mut [f64]) {
        let pt = recovery_point(self.coupling, p[1], self.s, self.r, p[0], tau);
        g[0] = pt.d_x_in;
        g[1] = pt.d_gamma0;
    }
}

/// Recovery with a free trapping rate; parameters `[x_in, Γ₀, s]`.
#[derive(Debug, Clone, Copy)]
pub struct TrappingModel {
    pub coupling: f64,
    pub r: f64,
}

impl Model for TrappingModel {
    fn n_params(&self) -> usize {
        3
    }
    fn eval(&self, tau: f64, p: &[f64]) -> f64 {
        recovery_point(self.coupling, p[1], p[2], self.r, p[0], tau).gamma
    }
    fn gradient(&self, tau: f64, p: &[f64], g: &mut [f64]) {
        let pt = recovery_point(self.coupling, p[1], p[2], self.r, p[0], tau);
        g[0] = pt.d_x_in;
        g[1] = pt.d_gamma0;
        g[2] = pt.d_s;
    }
}
