//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the library's model or fit code.

#![allow(dead_code)]

/// Right-hand side `dx/dt = −r·x² − s·x + g`.
fn rhs(r: f64, s: f64, g: f64, x: f64) -> f64 {
    -r * x * x - s * x + g
}

// Dormand–Prince 5(4) tableau
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Integrate `dx/dt = −r·x² − s·x + g` from `x(0) = x_start` and sample at the
/// (sorted, non-negative) `times` with an adaptive Dormand–Prince 5(4) scheme.
pub fn integrate_rt(r: f64, s: f64, g: f64, x_start: f64, times: &[f64], rtol: f64) -> Vec<f64> {
    let f = |x: f64| rhs(r, s, g, x);
    let scale = 1.0 / (s + r * x_start.abs() + 1.0);
    let mut h = 1e-3 * scale;
    let (mut t, mut x) = (0.0, x_start);
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let step = h.min(target - t);
            let mut k = [0.0; 7];
            for i in 0..7 {
                let xi = x + step * (0..i).map(|j| A[i][j] * k[j]).sum::<f64>();
                k[i] = f(xi);
            }
            let x5 = x + step * (0..7).map(|i| B5[i] * k[i]).sum::<f64>();
            let x4 = x + step * (0..7).map(|i| B4[i] * k[i]).sum::<f64>();
            let tol = rtol * x5.abs().max(x.abs()) + 1e-300;
            let err = (x5 - x4).abs() / tol;
            if err <= 1.0 {
                t += step;
                x = x5;
                if step < h {
                    // landed on the sample time; keep the unclipped step size
                    continue;
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
        }
        out.push(x);
    }
    out
}

/// Weighted straight-line fit from raw sums: `(slope, intercept, σ_slope, σ_intercept, χ²)`,
/// errors unscaled.
pub fn raw_sums_line(x: &[f64], y: &[f64], sigma: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((x, y), e) in x.iter().zip(y).zip(sigma) {
        let w = 1.0 / (e * e);
        s += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let d = s * sxx - sx * sx;
    let a = (s * sxy - sx * sy) / d;
    let b = (sxx * sy - sx * sxy) / d;
    let chi2 = x.iter().zip(y).zip(sigma).map(|((x, y), e)| ((y - a * x - b) / e).powi(2)).sum();
    (a, b, (s / d).sqrt(), (sxx / d).sqrt(), chi2)
}

/// Smallest `i` such that `v[i..]` is non-increasing, by scanning every suffix.
pub fn brute_force_truncation(v: &[f64]) -> Option<usize> {
    (0..v.len()).find(|&i| v[i..].windows(2).all(|w| w[1] <= w[0]))
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(a.abs())
    }
}

pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}
