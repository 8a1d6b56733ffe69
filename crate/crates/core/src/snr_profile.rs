//! Cross-problem gradient SNR per pass-rate bin.
//!
//! Within a bin, `SNR = ‖ḡ‖ / sqrt(mean ‖g_i − ḡ‖²)` where each problem
//! contributes one gradient vector.

use crate::error::{domain, Error, Result};
use crate::numerics::fmt_sig;
use crate::passrate::{bin_index, equal_width_edges};
use std::cmp::Ordering;
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub problem_id: String,
    pub pass_rate: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Undefined for empty bins.
    pub mean_p: Option<f64>,
    /// Undefined for empty bins and for bins whose gradients have zero spread.
    pub snr: Option<f64>,
    /// Count > 0 but all gradients identical.
    pub degenerate: bool,
    pub snr_norm: Option<f64>,
    pub theory_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrProfile {
    pub bins: Vec<SnrBin>,
}

fn record_order(a: &GradientRecord, b: &GradientRecord) -> Ordering {
    a.problem_id.cmp(&b.problem_id).then(a.pass_rate.total_cmp(&b.pass_rate)).then_with(|| {
        a.gradient.iter().zip(&b.gradient).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

/// Records grouped by bin. Accumulators over disjoint record sets can be
/// merged, and the finished profile does not depend on how the records were
/// split or ordered.
#[derive(Debug, Clone)]
pub struct SnrAccumulator {
    edges: Vec<f64>,
    dim: Option<usize>,
    bins: Vec<Vec<GradientRecord>>,
}

impl SnrAccumulator {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(domain(format!("need at least 2 bins, got {num_bins}")));
        }
        Ok(SnrAccumulator { edges: equal_width_edges(num_bins), dim: None, bins: vec![Vec::new(); num_bins] })
    }

    fn check_dim(&mut self, d: usize) -> Result<()> {
        match self.dim {
            None if d == 0 => Err(domain("gradient dimension must be at least 1")),
            None => {
                self.dim = Some(d);
                Ok(())
            }
            Some(e) if e != d => Err(domain(format!("gradient dimension mismatch: expected {e}, got {d}"))),
            Some(_) => Ok(()),
        }
    }

    pub fn push(&mut self, r: GradientRecord) -> Result<()> {
        self.check_dim(r.gradient.len())?;
        if r.gradient.iter().any(|x| !x.is_finite()) {
            return Err(domain(format!("problem {}: non-finite gradient entry", r.problem_id)));
        }
        let j = bin_index(&self.edges, r.pass_rate)
            .ok_or_else(|| domain(format!("problem {}: pass rate {} outside [0,1]", r.problem_id, r.pass_rate)))?;
        self.bins[j].push(r);
        Ok(())
    }

    pub fn merge(mut self, other: SnrAccumulator) -> Result<Self> {
        if self.edges != other.edges {
            return Err(domain("cannot merge profiles with different bins"));
        }
        if let Some(d) = other.dim {
            self.check_dim(d)?;
        }
        for (mine, theirs) in self.bins.iter_mut().zip(other.bins) {
            mine.extend(theirs);
        }
        Ok(self)
    }

    pub fn finish(mut self) -> SnrProfile {
        let bins = self
            .bins
            .iter_mut()
            .enumerate()
            .map(|(j, recs)| {
                recs.sort_by(record_order);
                let (lo, hi) = (self.edges[j], self.edges[j + 1]);
                bin_stats(lo, hi, recs)
            })
            .collect();
        SnrProfile { bins }
    }
}

fn bin_stats(lo: f64, hi: f64, recs: &[GradientRecord]) -> SnrBin {
    let count = recs.len();
    let empty = SnrBin { lo, hi, count, mean_p: None, snr: None, degenerate: false, snr_norm: None, theory_norm: None };
    if count == 0 {
        return empty;
    }
    let n = count as f64;
    let d = recs[0].gradient.len();
    let mean_p = recs.iter().map(|r| r.pass_rate).sum::<f64>() / n;
    let mut gbar = vec![0.0; d];
    for r in recs {
        for (m, g) in gbar.iter_mut().zip(&r.gradient) {
            *m += g;
        }
    }
    gbar.iter_mut().for_each(|m| *m /= n);
    let spread =
        recs.iter().map(|r| r.gradient.iter().zip(&gbar).map(|(g, m)| (g - m) * (g - m)).sum::<f64>()).sum::<f64>() / n;
    let mean_norm = gbar.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = recs.iter().map(|r| r.gradient.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n;
    // identical gradients leave only rounding residue in the spread
    let degenerate = spread <= 1e-24 * scale || spread == 0.0;
    SnrBin {
        mean_p: Some(mean_p),
        snr: if degenerate { None } else { Some(mean_norm / spread.sqrt()) },
        degenerate,
        ..empty
    }
}

pub fn compute_snr_bins(records: &[GradientRecord], num_bins: usize) -> Result<SnrProfile> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no gradient records".into()));
    }
    let mut acc = SnrAccumulator::new(num_bins)?;
    for r in records {
        acc.push(r.clone())?;
    }
    Ok(acc.finish())
}

/// Theory curve sqrt(p(1−p)) at a bin's mean pass rate.
pub fn theory_height(mean_p: f64) -> f64 {
    (mean_p * (1.0 - mean_p)).max(0.0).sqrt()
}

/// Divide empirical SNR and the theory curve by their respective maxima over
/// the bins whose SNR is defined.
pub fn normalize_profile(profile: &SnrProfile) -> Result<SnrProfile> {
    let defined: Vec<&SnrBin> = profile.bins.iter().filter(|b| b.snr.is_some() && b.count > 0).collect();
    if defined.is_empty() {
        return Err(Error::Degenerate("no bin has a defined SNR".into()));
    }
    let max_snr = defined.iter().filter_map(|b| b.snr).fold(f64::NEG_INFINITY, f64::max);
    let max_th = defined.iter().filter_map(|b| b.mean_p.map(theory_height)).fold(f64::NEG_INFINITY, f64::max);
    let bins = profile
        .bins
        .iter()
        .map(|b| {
            let ok = b.snr.is_some() && b.count > 0;
            SnrBin {
                snr_norm: if ok && max_snr > 0.0 { b.snr.map(|s| s / max_snr) } else { None },
                theory_norm: if ok && max_th > 0.0 { b.mean_p.map(|p| theory_height(p) / max_th) } else { None },
                ..b.clone()
            }
        })
        .collect();
    Ok(SnrProfile { bins })
}

pub const MID_BAND: (f64, f64) = (0.35, 0.65);
pub const EDGE_LO: f64 = 0.2;
pub const EDGE_HI: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellScore {
    pub is_bell: bool,
    pub mid_over_edge_ratio: f64,
    pub mid_bins: usize,
    pub edge_bins: usize,
}

/// Mean normalized SNR of mid bins over that of edge bins.
pub fn bell_shape_score(profile: &SnrProfile) -> Result<BellScore> {
    let defined: Vec<(f64, f64)> = profile.bins.iter().filter_map(|b| Some((b.mean_p?, b.snr_norm?))).collect();
    if defined.len() < 3 {
        return Err(Error::InsufficientData(format!("{} normalized bins, need at least 3", defined.len())));
    }
    let mid: Vec<f64> = defined.iter().filter(|(p, _)| *p >= MID_BAND.0 && *p <= MID_BAND.1).map(|x| x.1).collect();
    let edge: Vec<f64> = defined.iter().filter(|(p, _)| *p < EDGE_LO || *p > EDGE_HI).map(|x| x.1).collect();
    if mid.is_empty() || edge.is_empty() {
        return Err(Error::InsufficientData(format!(
            "bell score needs both mid and edge bins (mid={}, edge={})",
            mid.len(),
            edge.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let edge_mean = mean(&edge);
    if edge_mean == 0.0 {
        return Err(Error::Degenerate("edge bins have zero SNR".into()));
    }
    let ratio = mean(&mid) / edge_mean;
    Ok(BellScore { is_bell: ratio > 1.0, mid_over_edge_ratio: ratio, mid_bins: mid.len(), edge_bins: edge.len() })
}

/// Read `problem_id,pass_rate,g0,...,g{D-1}` records.
pub fn read_gradient_records<R: Read>(reader: R) -> Result<Vec<GradientRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if headers.len() < 3 || &headers[0] != "problem_id" || &headers[1] != "pass_rate" {
        return Err(Error::Parse { line: 1, msg: "header must be problem_id,pass_rate,g0,...".into() });
    }
    for (k, h) in headers.iter().skip(2).enumerate() {
        if h != format!("g{k}") {
            return Err(Error::Parse { line: 1, msg: format!("expected column g{k}, found {h}") });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, got {}", headers.len(), rec.len()) });
        }
        let num =
            |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("bad number {s:?}: {e}") });
        let gradient = rec.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
        out.push(GradientRecord { problem_id: rec[0].to_string(), pass_rate: num(&rec[1])?, gradient });
    }
    Ok(out)
}

pub fn write_gradient_records<W: Write>(writer: W, records: &[GradientRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.gradient.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["problem_id".to_string(), "pass_rate".to_string()];
    header.extend((0..d).map(|k| format!("g{k}")));
    w.write_record(&header).map_err(io_err)?;
    for r in records {
        let mut row = vec![r.problem_id.clone(), fmt_sig(r.pass_rate)];
        row.extend(r.gradient.iter().map(|&x| fmt_sig(x)));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

pub const PROFILE_COLUMNS: [&str; 7] = ["bin_lo", "bin_hi", "mean_p", "count", "snr", "snr_norm", "theory_norm"];

pub fn write_profile<W: Write>(writer: W, profile: &SnrProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PROFILE_COLUMNS).map_err(io_err)?;
    for b in &profile.bins {
        w.write_record([
            fmt_sig(b.lo),
            fmt_sig(b.hi),
            opt(b.mean_p),
            b.count.to_string(),
            opt(b.snr),
            opt(b.snr_norm),
            opt(b.theory_norm),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a profile table written by `write_profile`.
pub fn read_profile<R: Read>(reader: R) -> Result<SnrProfile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != PROFILE_COLUMNS {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", PROFILE_COLUMNS.join(",")) });
    }
    let mut bins = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let num =
            |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("bad number {s:?}: {e}") });
        let optnum = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
        let count =
            rec[3].trim().parse::<usize>().map_err(|e| Error::Parse { line, msg: format!("bad count: {e}") })?;
        let snr = optnum(&rec[4])?;
        bins.push(SnrBin {
            lo: num(&rec[0])?,
            hi: num(&rec[1])?,
            mean_p: optnum(&rec[2])?,
            count,
            snr,
            degenerate: count > 0 && snr.is_none(),
            snr_norm: optnum(&rec[5])?,
            theory_norm: optnum(&rec[6])?,
        });
    }
    if bins.is_empty() {
        return Err(Error::InsufficientData("profile has no rows".into()));
    }
    Ok(SnrProfile { bins })
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}
