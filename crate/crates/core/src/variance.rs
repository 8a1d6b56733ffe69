//! Gradient-variance ratio of weighted versus uniform batches, in empirical and
//! closed (Beta-moment) form, plus the non-convex SGD convergence bound.

use crate::error::{domain, Error, Result};
use crate::numerics::log_beta;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// The three Beta-function factors of the closed form and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRatio {
    pub ratio: f64,
    /// B(2α+γ1+1, 2β+γ2+1) = E[w² s²]
    pub weighted_moment: f64,
    /// B(α+1, β+1) = E[w]
    pub kernel_mean: f64,
    /// B(γ1+1, γ2+1) = E[s²]
    pub second_moment: f64,
}

impl VarianceSpec {
    pub fn validate(&self) -> Result<()> {
        let VarianceSpec { alpha: a, beta: b, gamma1: g1, gamma2: g2 } = *self;
        if ![a, b, g1, g2].iter().all(|x| x.is_finite()) {
            return Err(domain("variance spec entries must be finite"));
        }
        if a < 0.0 || b < 0.0 {
            return Err(domain(format!("kernel exponents must be nonnegative, got alpha={a} beta={b}")));
        }
        let checks = [
            ("2α+γ1+1", 2.0 * a + g1 + 1.0),
            ("2β+γ2+1", 2.0 * b + g2 + 1.0),
            ("γ1+1", g1 + 1.0),
            ("γ2+1", g2 + 1.0),
            ("α+1", a + 1.0),
            ("β+1", b + 1.0),
        ];
        for (name, v) in checks {
            if !(v > 0.0) {
                return Err(domain(format!("{name} must be positive (got {v})")));
            }
        }
        Ok(())
    }
}

/// R = B(2α+γ1+1, 2β+γ2+1) / (B(α+1, β+1)² B(γ1+1, γ2+1)).
pub fn variance_ratio_beta(spec: &VarianceSpec) -> Result<BetaRatio> {
    spec.validate()?;
    let VarianceSpec { alpha: a, beta: b, gamma1: g1, gamma2: g2 } = *spec;
    let num = log_beta(2.0 * a + g1 + 1.0, 2.0 * b + g2 + 1.0)?;
    let ker = log_beta(a + 1.0, b + 1.0)?;
    let sec = log_beta(g1 + 1.0, g2 + 1.0)?;
    Ok(BetaRatio {
        ratio: (num - 2.0 * ker - sec).exp(),
        weighted_moment: num.exp(),
        kernel_mean: ker.exp(),
        second_moment: sec.exp(),
    })
}

/// Same ratio with pass rates uniform on [ε, 1−ε] instead of [0, 1].
///
/// Diagnostic only; evaluated by composite Gauss–Legendre quadrature.
pub fn variance_ratio_beta_truncated(spec: &VarianceSpec, epsilon: f64) -> Result<f64> {
    spec.validate()?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(domain(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let VarianceSpec { alpha: a, beta: b, gamma1: g1, gamma2: g2 } = *spec;
    let w = |p: f64| p.powf(a) * (1.0 - p).powf(b);
    let s2 = |p: f64| p.powf(g1) * (1.0 - p).powf(g2);
    let ew = gauss_legendre(w, epsilon, 1.0 - epsilon, 400);
    let es = gauss_legendre(s2, epsilon, 1.0 - epsilon, 400);
    let ews = gauss_legendre(|p| w(p) * w(p) * s2(p), epsilon, 1.0 - epsilon, 400);
    let len = 1.0 - 2.0 * epsilon;
    Ok((ews / len) / ((ew / len).powi(2) * (es / len)))
}

fn gauss_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    // 5-point rule
    const X: [f64; 5] =
        [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let mid = lo + (i as f64 + 0.5) * h;
        total += X.iter().zip(W).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h;
    }
    total
}

/// γ1 = 2a_s − a', γ2 = 2b_s − b'.
pub fn gamma_from_signal(a_s: f64, b_s: f64, a_prime: f64, b_prime: f64) -> (f64, f64) {
    (2.0 * a_s - a_prime, 2.0 * b_s - b_prime)
}

/// One problem's contribution to a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub weight: f64,
    /// E‖g‖² for this problem.
    pub second_moment: f64,
    /// E[g] for this problem.
    pub mean_grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBatchStats {
    pub records: Vec<BatchRecord>,
}

impl EmpiricalBatchStats {
    pub fn new(records: Vec<BatchRecord>) -> Result<Self> {
        let s = EmpiricalBatchStats { records };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.records.first().ok_or_else(|| Error::InsufficientData("empty batch".into()))?;
        let d = first.mean_grad.len();
        for (i, r) in self.records.iter().enumerate() {
            if r.mean_grad.len() != d {
                return Err(domain(format!("record {i} has gradient dimension {}, expected {d}", r.mean_grad.len())));
            }
            if !(r.weight >= 0.0) {
                return Err(domain(format!("record {i} has negative weight")));
            }
            let g2: f64 = r.mean_grad.iter().map(|x| x * x).sum();
            if r.second_moment < g2 * (1.0 - 1e-12) {
                return Err(domain(format!(
                    "record {i}: second moment {} below squared mean norm {g2}",
                    r.second_moment
                )));
            }
        }
        let n = self.records.len() as f64;
        let mw = self.records.iter().map(|r| r.weight).sum::<f64>() / n;
        if (mw - 1.0).abs() > 1e-9 {
            return Err(domain(format!("normalized weights must have mean 1, got {mw}")));
        }
        Ok(())
    }
}

/// Population moments entering the variance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceTerms {
    pub var_w: f64,
    pub mean_s2: f64,
    pub cov_w2_s2: f64,
    /// ‖E[w̃ g]‖²
    pub weighted_signal_sq: f64,
    /// ‖E[g]‖²
    pub signal_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRatio {
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub terms: VarianceTerms,
}

pub fn batch_terms(stats: &EmpiricalBatchStats) -> Result<VarianceTerms> {
    stats.validate()?;
    let rs = &stats.records;
    let n = rs.len() as f64;
    let d = rs[0].mean_grad.len();
    let mean = |f: &dyn Fn(&BatchRecord) -> f64| rs.iter().map(f).sum::<f64>() / n;
    let mw = mean(&|r| r.weight);
    let var_w = mean(&|r| (r.weight - mw).powi(2));
    let mean_s2 = mean(&|r| r.second_moment);
    let mean_w2 = mean(&|r| r.weight * r.weight);
    let cov_w2_s2 = mean(&|r| (r.weight * r.weight - mean_w2) * (r.second_moment - mean_s2));
    let mut wg = vec![0.0; d];
    let mut g = vec![0.0; d];
    for r in rs {
        for k in 0..d {
            wg[k] += r.weight * r.mean_grad[k] / n;
            g[k] += r.mean_grad[k] / n;
        }
    }
    Ok(VarianceTerms {
        var_w,
        mean_s2,
        cov_w2_s2,
        weighted_signal_sq: wg.iter().map(|x| x * x).sum(),
        signal_sq: g.iter().map(|x| x * x).sum(),
    })
}

/// σ²_eff / σ²_unif from population moments of the batch.
pub fn variance_ratio_empirical(stats: &EmpiricalBatchStats) -> Result<VarianceRatio> {
    let t = batch_terms(stats)?;
    if !(t.mean_s2 > 0.0) {
        return Err(Error::Degenerate("mean second moment is zero".into()));
    }
    let denominator = 1.0 - t.signal_sq / t.mean_s2;
    if !(denominator > 1e-15) {
        return Err(Error::Degenerate("uniform-weighting gradient variance is zero".into()));
    }
    let numerator = 1.0 + t.var_w + t.cov_w2_s2 / t.mean_s2 - t.weighted_signal_sq / t.mean_s2;
    Ok(VarianceRatio { ratio: numerator / denominator, numerator, denominator, terms: t })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovCondition {
    pub holds: bool,
    /// −Cov(w̃², s²)
    pub lhs: f64,
    /// Var(w̃) E[s²]
    pub rhs: f64,
}

/// Sufficient condition for R < 1 when mean gradients vanish.
pub fn cov_condition(stats: &EmpiricalBatchStats) -> Result<CovCondition> {
    let t = batch_terms(stats)?;
    let lhs = -t.cov_w2_s2;
    let rhs = t.var_w * t.mean_s2;
    Ok(CovCondition { holds: lhs > rhs, lhs, rhs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceBound {
    pub bound: f64,
    pub optimization_term: f64,
    pub noise_term: f64,
    /// Set when η > 1/L, outside the bound's hypothesis.
    pub warning: Option<String>,
}

/// 2·gap/(ηT) + ηLσ²_eff.
pub fn convergence_bound(loss_gap: f64, eta: f64, l: f64, t: u64, sigma_eff_sq: f64) -> Result<ConvergenceBound> {
    if !(eta > 0.0) || !(l > 0.0) || t == 0 {
        return Err(domain(format!("eta, L and T must be positive, got eta={eta} L={l} T={t}")));
    }
    if !(loss_gap >= 0.0) || !(sigma_eff_sq >= 0.0) {
        return Err(domain("loss gap and sigma_eff^2 must be nonnegative"));
    }
    let optimization_term = 2.0 * loss_gap / (eta * t as f64);
    let noise_term = eta * l * sigma_eff_sq;
    let warning = (eta * l > 1.0).then(|| format!("eta={eta} exceeds 1/L={}; the bound assumes eta <= 1/L", 1.0 / l));
    Ok(ConvergenceBound { bound: optimization_term + noise_term, optimization_term, noise_term, warning })
}
