//! Per-step descent rate, minimax robustness of the Beta kernel, and the
//! power-law SNR model fit.

use crate::error::{domain, Error, Result};
use crate::numerics::{sech, sech2};

/// Inputs of the one-step expected descent `Δ(w) = ηw‖E g‖² − (η²/2) w² E‖g‖² λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentParams {
    pub eta: f64,
    pub signal_sq: f64,
    pub second_moment: f64,
    pub lambda_max: f64,
}

impl DescentParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.eta, self.signal_sq, self.second_moment, self.lambda_max].iter().all(|x| x.is_finite());
        if !all_finite {
            return Err(domain("descent parameters must be finite"));
        }
        if !(self.eta > 0.0) {
            return Err(domain(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda_max > 0.0) {
            return Err(domain(format!("lambda_max must be positive, got {}", self.lambda_max)));
        }
        if !(self.signal_sq >= 0.0) {
            return Err(domain(format!("signal_sq must be nonnegative, got {}", self.signal_sq)));
        }
        if self.second_moment < self.signal_sq {
            return Err(domain(format!("second_moment {} is below signal_sq {}", self.second_moment, self.signal_sq)));
        }
        Ok(())
    }
}

pub fn descent_rate(w: f64, d: &DescentParams) -> Result<f64> {
    d.validate()?;
    if !(w >= 0.0) {
        return Err(domain(format!("weight must be nonnegative, got {w}")));
    }
    Ok(d.eta * w * d.signal_sq - 0.5 * d.eta * d.eta * w * w * d.second_moment * d.lambda_max)
}

/// The weight maximizing `descent_rate`.
pub fn optimal_weight(d: &DescentParams) -> Result<f64> {
    d.validate()?;
    if d.second_moment == 0.0 {
        return Err(Error::Degenerate("second moment is zero".into()));
    }
    Ok(d.signal_sq / (d.eta * d.second_moment * d.lambda_max))
}

/// Δ(ρ w*)/Δ(w*) = 2ρ − ρ².
pub fn efficiency_ratio(rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(domain(format!("rho must be nonnegative, got {rho}")));
    }
    Ok(2.0 * rho - rho * rho)
}

/// Scale that equalizes the two worst-case branches: sech(δ).
pub fn minimax_scale(delta: f64) -> Result<f64> {
    sech(delta)
}

/// min(f(c e^δ), f(c e^-δ)) with f the efficiency ratio.
pub fn worst_case_efficiency(c: f64, delta: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(domain(format!("scale must be positive, got {c}")));
    }
    if !(delta >= 0.0) {
        return Err(domain(format!("delta must be nonnegative, got {delta}")));
    }
    let hi = efficiency_ratio(c * delta.exp())?;
    let lo = efficiency_ratio(c * (-delta).exp())?;
    Ok(hi.min(lo))
}

pub fn minimax_weight(p: f64, a_prime: f64, b_prime: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain(format!("pass rate must lie in [0,1], got {p}")));
    }
    if !(a_prime > 0.0 && b_prime > 0.0) {
        return Err(domain(format!("exponents must be positive, got a'={a_prime} b'={b_prime}")));
    }
    Ok(sech(delta)? * p.powf(a_prime) * (1.0 - p).powf(b_prime))
}

/// Log remainder `ln snr² − a' ln p − b' ln(1−p)`.
pub fn remainder(p: f64, snr_sq: f64, a_prime: f64, b_prime: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Singularity(format!("remainder needs 0 < p < 1, got {p}")));
    }
    if !(snr_sq > 0.0) {
        return Err(domain(format!("squared SNR must be positive, got {snr_sq}")));
    }
    Ok(snr_sq.ln() - a_prime * p.ln() - b_prime * (1.0 - p).ln())
}

/// One row of the robustness table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub delta: f64,
    pub range_lo: f64,
    pub range_hi: f64,
    pub scale: f64,
    pub efficiency: f64,
}

pub fn robustness_row(delta: f64) -> Result<RobustnessRow> {
    Ok(RobustnessRow {
        delta,
        range_lo: (-delta).exp(),
        range_hi: delta.exp(),
        scale: minimax_scale(delta)?,
        efficiency: sech2(delta)?,
    })
}

pub const TABLE_DELTAS: [f64; 4] = [0.1, 0.3, 0.5, std::f64::consts::LN_2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrModelFit {
    pub a_prime: f64,
    pub b_prime: f64,
    /// SNR² ≈ c0 p^{a'} as p → 0.
    pub c0: f64,
    /// SNR² ≈ c1 (1−p)^{b'} as p → 1.
    pub c1: f64,
    pub intercept: f64,
    pub delta: f64,
    /// Guaranteed fraction of the optimal descent rate, sech²(δ).
    pub efficiency_floor: f64,
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares fit of `ln snr² = a' ln p + b' ln(1−p) + k`.
///
/// δ is the largest deviation of the residual from its median, so a constant
/// offset in SNR² does not count as misspecification.
pub fn fit_snr_model(points: &[(f64, f64)]) -> Result<SnrModelFit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 points, got {}", points.len())));
    }
    for &(p, s) in points {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Fit(format!("pass rate {p} is not strictly inside (0,1)")));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Fit(format!("squared SNR {s} at p={p} must be positive")));
        }
    }
    if !points.iter().any(|&(p, _)| p < 0.5) || !points.iter().any(|&(p, _)| p > 0.5) {
        return Err(Error::Fit("points must cover both halves of (0,1)".into()));
    }
    // Normal equations, accumulated in input order.
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for &(p, s) in points {
        let row = [p.ln(), (1.0 - p).ln(), 1.0];
        let y = s.ln();
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let scale = ata[0][0].max(ata[1][1]).max(ata[2][2]);
    let det = ata[0][0] * (ata[1][1] * ata[2][2] - ata[1][2] * ata[2][1])
        - ata[0][1] * (ata[1][0] * ata[2][2] - ata[1][2] * ata[2][0])
        + ata[0][2] * (ata[1][0] * ata[2][1] - ata[1][1] * ata[2][0]);
    if det.abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::Fit("degenerate design: pass rates do not identify both exponents".into()));
    }
    let [a_prime, b_prime, k] = solve3(ata, aty).ok_or_else(|| Error::Fit("singular normal equations".into()))?;
    if !(a_prime > 0.0 && b_prime > 0.0) {
        return Err(Error::Fit(format!(
            "fitted exponents must be positive for a boundary-vanishing model, got a'={a_prime} b'={b_prime}"
        )));
    }
    let r: Vec<f64> =
        points.iter().map(|&(p, s)| remainder(p, s, a_prime, b_prime).map(|x| x - k)).collect::<Result<_>>()?;
    let m = median(&r);
    let delta = r.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
    Ok(SnrModelFit { a_prime, b_prime, c0: k.exp(), c1: k.exp(), intercept: k, delta, efficiency_floor: sech2(delta)? })
}
