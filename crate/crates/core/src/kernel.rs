//! Beta-kernel weights `w(p) = p^α (1-p)^β` and the quantities around them.

use crate::error::{domain, Error, Result};
use crate::numerics::{mean_var, pow0};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub alpha: f64,
    pub beta: f64,
}

impl KernelParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let k = KernelParams { alpha, beta };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(domain(format!(
                "kernel exponents must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub const DEFAULT: KernelParams = KernelParams { alpha: 1.0, beta: 1.0 };
    pub const FLAT: KernelParams = KernelParams { alpha: 0.0, beta: 0.0 };
}

fn check_unit(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain(format!("pass rate must lie in [0,1], got {p}")));
    }
    Ok(())
}

/// `p^α (1-p)^β` with 0^0 = 1.
pub fn beta_weight(p: f64, params: KernelParams) -> Result<f64> {
    check_unit(p)?;
    params.validate()?;
    Ok(pow0(p, params.alpha) * pow0(1.0 - p, params.beta))
}

/// Mode of the kernel, α/(α+β).
pub fn kernel_peak(params: KernelParams) -> Result<f64> {
    params.validate()?;
    let s = params.alpha + params.beta;
    if s == 0.0 {
        return Err(Error::Degenerate("flat kernel (alpha+beta=0) has no unique peak".into()));
    }
    Ok(params.alpha / s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub problem_id: String,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub entries: Vec<WeightEntry>,
    /// Mean raw weight over all entries.
    pub mean_raw: f64,
    /// Set when every raw weight is zero; normalized weights are then all zero.
    pub degenerate: bool,
}

impl WeightVector {
    pub fn normalized(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.normalized).collect()
    }
}

/// Divide each weight by the mean over all entries, zeros included.
pub fn normalize_weights(raw: &[(String, f64)]) -> Result<WeightVector> {
    if raw.is_empty() {
        return Err(Error::InsufficientData("no weights to normalize".into()));
    }
    if let Some((id, w)) = raw.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(domain(format!("weight for {id} must be finite and nonnegative, got {w}")));
    }
    let mean = raw.iter().map(|(_, w)| w).sum::<f64>() / raw.len() as f64;
    let degenerate = mean == 0.0;
    let entries = raw
        .iter()
        .map(|(id, w)| WeightEntry {
            problem_id: id.clone(),
            raw: *w,
            normalized: if degenerate { 0.0 } else { w / mean },
        })
        .collect();
    Ok(WeightVector { entries, mean_raw: mean, degenerate })
}

/// Unit-mean normalization of a plain slice; all-zero input stays all-zero.
pub fn normalize_slice(raw: &[f64]) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|w| w / mean).collect()
}

/// Raw weights with an optional floor applied to every entry.
pub fn kernel_weights(ps: &[f64], params: KernelParams, floor: f64) -> Result<Vec<f64>> {
    if !(floor >= 0.0) {
        return Err(domain(format!("weight floor must be nonnegative, got {floor}")));
    }
    ps.iter().map(|&p| beta_weight(p, params).map(|w| w.max(floor))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZpdMoments {
    pub epsilon: f64,
    pub mean_p: f64,
    pub var_p: f64,
    pub count: usize,
}

/// Mean and population variance of pass rates inside [ε, 1-ε].
pub fn zpd_moments(pass_rates: &[f64], epsilon: f64) -> Result<ZpdMoments> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(domain(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let band: Vec<f64> = pass_rates.iter().cloned().filter(|&p| p >= epsilon && p <= 1.0 - epsilon).collect();
    if band.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} pass rates inside [{epsilon}, {}], need at least 2",
            band.len(),
            1.0 - epsilon
        )));
    }
    let (mean_p, var_p) = mean_var(&band);
    Ok(ZpdMoments { epsilon, mean_p, var_p, count: band.len() })
}

/// Relative slack for treating `v == p̄(1-p̄)/3` as on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Method-of-moments exponents: Beta(α+1, β+1) has mean p̄ and variance v.
///
/// Below the flat boundary only α+β > 0 is guaranteed; a skewed p̄ can still
/// give one negative exponent, which is returned as is.
pub fn select_exponents_raw(mean_p: f64, var_p: f64) -> Result<KernelParams> {
    if !(mean_p > 0.0 && mean_p < 1.0) {
        return Err(domain(format!("mean pass rate must lie in (0,1), got {mean_p}")));
    }
    if var_p == 0.0 {
        return Err(Error::Degenerate("pass-rate variance is zero; exponents are unbounded".into()));
    }
    if !(var_p > 0.0) {
        return Err(domain(format!("variance must be positive, got {var_p}")));
    }
    let pq = mean_p * (1.0 - mean_p);
    let limit = pq / 3.0;
    if var_p > limit * (1.0 + BOUNDARY_TOL) {
        return Err(Error::Validity(format!(
            "variance {var_p} exceeds p(1-p)/3 = {limit}; alpha+beta would be negative, use the flat kernel (alpha=beta=0)"
        )));
    }
    if var_p >= limit * (1.0 - BOUNDARY_TOL) {
        // exactly the uniform distribution's moments
        return Ok(KernelParams::FLAT);
    }
    let t = pq / var_p - 1.0;
    Ok(KernelParams { alpha: mean_p * t - 1.0, beta: (1.0 - mean_p) * t - 1.0 })
}

pub fn select_exponents(m: &ZpdMoments) -> Result<KernelParams> {
    select_exponents_raw(m.mean_p, m.var_p)
}

/// True when (p̄, v) sits on the flat-kernel boundary v = p̄(1-p̄)/3.
pub fn is_flat_boundary(mean_p: f64, var_p: f64) -> bool {
    let limit = mean_p * (1.0 - mean_p) / 3.0;
    (var_p - limit).abs() <= limit * BOUNDARY_TOL
}

/// Mean and variance of Beta(a, b).
pub fn beta_moments(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (a / s, a * b / (s * s * (s + 1.0)))
}

/// SNR²/(1+SNR²).
pub fn saturated_weight(snr_sq: f64) -> Result<f64> {
    if !(snr_sq >= 0.0) {
        return Err(domain(format!("squared SNR must be nonnegative, got {snr_sq}")));
    }
    if snr_sq.is_infinite() {
        return Ok(1.0);
    }
    Ok(snr_sq / (1.0 + snr_sq))
}

/// Learning-signal quality `p^{a'/2} (1-p)^{b'/2+1}` and the location of its peak.
pub fn q_signal(p: f64, a_prime: f64, b_prime: f64) -> Result<(f64, f64)> {
    check_unit(p)?;
    if !(a_prime > 0.0 && b_prime > 0.0) {
        return Err(domain(format!("SNR exponents must be positive, got a'={a_prime} b'={b_prime}")));
    }
    let a = a_prime / 2.0;
    let b = b_prime / 2.0 + 1.0;
    Ok((p.powf(a) * (1.0 - p).powf(b), a / (a + b)))
}

/// Fisher information of a Bernoulli(p) pass/fail outcome, 1/(p(1-p)).
pub fn fisher_info(p: f64) -> Result<f64> {
    check_unit(p)?;
    if p == 0.0 || p == 1.0 {
        return Err(Error::Singularity(format!("Fisher information is infinite at p={p}")));
    }
    Ok(1.0 / (p * (1.0 - p)))
}
