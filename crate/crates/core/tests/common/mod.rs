//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use cadistill::sim::SimConfig;
use cadistill::variance::{BatchRecord, VarianceSpec};

pub fn golden_config() -> SimConfig {
    cadistill::cli::parse_config(include_str!("../../configs/golden.toml")).expect("golden config parses")
}

/// Tanh-sinh quadrature on [0, 1]. `f` receives both `x` and `1 - x`, each
/// computed without cancellation, so endpoint singularities are handled.
pub fn tanh_sinh_unit(f: impl Fn(f64, f64) -> f64) -> f64 {
    let h = 1.0 / 64.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut total = 0.0;
    for k in -384i32..=384 {
        let t = k as f64 * h;
        let u = half_pi * t.sinh();
        let x = 1.0 / (1.0 + (-2.0 * u).exp());
        let y = 1.0 / (1.0 + (2.0 * u).exp());
        if x == 0.0 || y == 0.0 {
            continue;
        }
        // d/dt of (1 + tanh u)/2
        let w = 0.5 * half_pi * t.cosh() / u.cosh().powi(2);
        if w == 0.0 || !w.is_finite() {
            continue;
        }
        total += w * f(x, y);
    }
    total * h
}

/// Closed-form variance ratio recomputed by quadrature of its three moments.
pub fn variance_ratio_quadrature(s: &VarianceSpec) -> f64 {
    let w = |x: f64, y: f64| x.powf(s.alpha) * y.powf(s.beta);
    let s2 = |x: f64, y: f64| x.powf(s.gamma1) * y.powf(s.gamma2);
    let ew = tanh_sinh_unit(w);
    let es = tanh_sinh_unit(s2);
    let ews = tanh_sinh_unit(|x, y| w(x, y).powi(2) * s2(x, y));
    ews / (ew * ew * es)
}

/// tr Cov(w̃ g) / tr Cov(g) by explicit enumeration. Each record becomes two
/// equally likely gradients m ± u with ‖u‖² = s² − ‖m‖², so the record's
/// mean and second moment are exactly as given.
pub fn brute_force_ratio(records: &[BatchRecord]) -> f64 {
    let d = records[0].mean_grad.len();
    let mut atoms: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let m2: f64 = r.mean_grad.iter().map(|x| x * x).sum();
        let radius = (r.second_moment - m2).max(0.0).sqrt();
        // any direction works; rotate it per record
        let mut dir = vec![0.0; d];
        dir[i % d] = 1.0;
        for sign in [1.0, -1.0] {
            let g: Vec<f64> = r.mean_grad.iter().zip(&dir).map(|(m, u)| m + sign * radius * u).collect();
            atoms.push((r.weight, g));
        }
    }
    let n = atoms.len() as f64;
    let trace_cov = |scale: &dyn Fn(f64) -> f64| {
        let mut mean = vec![0.0; d];
        for (w, g) in &atoms {
            for k in 0..d {
                mean[k] += scale(*w) * g[k] / n;
            }
        }
        let mut tr = 0.0;
        for k in 0..d {
            let mut c = 0.0;
            for (w, g) in &atoms {
                c += (scale(*w) * g[k] - mean[k]).powi(2);
            }
            tr += c / n;
        }
        tr
    };
    trace_cov(&|w| w) / trace_cov(&|_| 1.0)
}
