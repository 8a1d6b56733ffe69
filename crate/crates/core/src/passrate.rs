//! Pass rates from rollout outcomes, the hard filter, and pass-rate histograms.

use crate::error::{domain, Error, Result};
use serde::{Deserialize, Serialize};

/// Correctness outcomes of K student rollouts on one problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub problem_id: String,
    pub outcomes: Vec<bool>,
}

impl RolloutRecord {
    pub fn new(problem_id: impl Into<String>, outcomes: Vec<bool>) -> Result<Self> {
        let r = RolloutRecord { problem_id: problem_id.into(), outcomes };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.problem_id.is_empty() {
            return Err(domain("problem_id must be non-empty"));
        }
        if self.outcomes.is_empty() {
            return Err(domain(format!("problem {}: outcomes must be non-empty", self.problem_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassRate {
    pub p: f64,
    pub k: u32,
    pub successes: u32,
}

impl PassRate {
    pub fn new(successes: u32, k: u32) -> Result<Self> {
        if k == 0 || successes > k {
            return Err(domain(format!("invalid pass rate {successes}/{k}")));
        }
        Ok(PassRate { p: successes as f64 / k as f64, k, successes })
    }
}

pub fn estimate_pass_rate(record: &RolloutRecord) -> Result<PassRate> {
    if record.outcomes.is_empty() {
        return Err(domain("empty outcomes"));
    }
    let successes = record.outcomes.iter().filter(|&&o| o).count() as u32;
    PassRate::new(successes, record.outcomes.len() as u32)
}

/// Keep iff `lo <= p <= hi` (both ends inclusive).
pub fn hard_filter(p: f64, lo: f64, hi: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(domain(format!("hard filter needs 0 <= lo <= hi <= 1, got lo={lo} hi={hi}")));
    }
    Ok(lo <= p && p <= hi)
}

pub const DEFAULT_FILTER_LO: f64 = 0.2;
pub const DEFAULT_FILTER_HI: f64 = 0.8;

/// Bins used for curriculum reporting: Low [0,0.2), Med [0.2,0.8), High [0.8,1].
pub const CURRICULUM_EDGES: [f64; 4] = [0.0, 0.2, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PassRateHistogram {
    pub bin_edges: Vec<f64>,
    pub fractions: Vec<f64>,
    pub mean_p: f64,
}

pub fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(domain("need at least two bin edges"));
    }
    if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(domain("bin edges must start at 0 and end at 1"));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(domain("bin edges must be strictly increasing"));
    }
    Ok(())
}

/// Index of the bin containing `p`: left-closed, right-open, except the last
/// bin which also includes its right edge.
pub fn bin_index(edges: &[f64], p: f64) -> Option<usize> {
    let nb = edges.len() - 1;
    if !(p >= edges[0] && p <= edges[nb]) {
        return None;
    }
    if p == edges[nb] {
        return Some(nb - 1);
    }
    // partition_point gives the first edge strictly greater than p
    Some(edges.partition_point(|&e| e <= p) - 1)
}

/// `n` equal-width edges over [0, 1].
pub fn equal_width_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|j| j as f64 / n as f64).collect()
}

pub fn histogram(pass_rates: &[f64], edges: &[f64]) -> Result<PassRateHistogram> {
    if pass_rates.is_empty() {
        return Err(Error::InsufficientData("histogram of zero pass rates".into()));
    }
    check_edges(edges)?;
    let mut counts = vec![0usize; edges.len() - 1];
    for &p in pass_rates {
        let j = bin_index(edges, p).ok_or_else(|| domain(format!("pass rate {p} outside [0,1]")))?;
        counts[j] += 1;
    }
    let n = pass_rates.len() as f64;
    Ok(PassRateHistogram {
        bin_edges: edges.to_vec(),
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_p: pass_rates.iter().sum::<f64>() / n,
    })
}
