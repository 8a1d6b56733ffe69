//! File formats and command implementations behind the `cadistill` binary.
//!
//! Each command function takes parsed inputs and returns the rows it would
//! print, so the binary stays a thin layer over the library.

use crate::error::{Error, Result};
use crate::kernel::{is_flat_boundary, normalize_weights, select_exponents, zpd_moments, KernelParams, WeightVector};
use crate::numerics::fmt_sig;
use crate::passrate::{estimate_pass_rate, RolloutRecord};
use crate::robustness::{fit_snr_model, robustness_row, RobustnessRow, SnrModelFit, TABLE_DELTAS};
use crate::sim::{
    build_world, measure_snr, train_observed, LossDirection, ReverseEstimator, SimConfig, SimMetrics, WeightScheme,
    WorldParams,
};
use crate::snr_profile::{GradientRecord, SnrProfile};
use crate::variance::{variance_ratio_beta, variance_ratio_beta_truncated, BetaRatio, VarianceSpec};
use serde::Deserialize;
use std::collections::HashSet;
use std::io::{BufRead, Write};

/// Read one JSON object `{"problem_id": ..., "outcomes": [...]}` per line.
/// Blank lines are skipped; duplicate ids are rejected.
pub fn read_rollouts<R: BufRead>(reader: R) -> Result<Vec<RolloutRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        rec.validate().map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if !seen.insert(rec.problem_id.clone()) {
            return Err(Error::Parse { line: line_no, msg: format!("duplicate problem_id {:?}", rec.problem_id) });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    Ok(out)
}

pub fn write_rollouts<W: Write>(mut w: W, records: &[RolloutRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn write_rows<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    wr.write_record(header).map_err(io)?;
    for r in rows {
        wr.write_record(r).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub problem_id: String,
    pub p: f64,
    pub w: f64,
    pub w_norm: f64,
}

/// Per-problem pass rate, raw weight and unit-mean weight, in input order.
pub fn weight_table(
    records: &[RolloutRecord],
    scheme: WeightScheme,
    floor: f64,
) -> Result<(Vec<WeightRow>, WeightVector)> {
    let ps: Vec<f64> = records.iter().map(|r| estimate_pass_rate(r).map(|p| p.p)).collect::<Result<_>>()?;
    let raw = crate::sim::scheme_weights(scheme, &ps, floor)?;
    let named: Vec<(String, f64)> = records.iter().zip(&raw).map(|(r, w)| (r.problem_id.clone(), *w)).collect();
    let wv = normalize_weights(&named)?;
    let rows = wv
        .entries
        .iter()
        .zip(&ps)
        .map(|(e, &p)| WeightRow { problem_id: e.problem_id.clone(), p, w: e.raw, w_norm: e.normalized })
        .collect();
    Ok((rows, wv))
}

pub fn write_weight_table<W: Write>(w: W, rows: &[WeightRow]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        rows.iter().map(|r| vec![r.problem_id.clone(), fmt_sig(r.p), fmt_sig(r.w), fmt_sig(r.w_norm)]).collect();
    write_rows(w, &["problem_id", "p", "w", "w_norm"], &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectStatus {
    Valid(KernelParams),
    /// Variance exactly at the uniform limit: the flat kernel.
    FlatBoundary,
    /// Variance above the limit; the flat kernel is recommended.
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectReport {
    pub epsilon: f64,
    pub mean_p: f64,
    pub var_p: f64,
    pub count: usize,
    pub status: SelectStatus,
}

pub fn select_report(records: &[RolloutRecord], epsilon: f64) -> Result<SelectReport> {
    let ps: Vec<f64> = records.iter().map(|r| estimate_pass_rate(r).map(|p| p.p)).collect::<Result<_>>()?;
    let m = zpd_moments(&ps, epsilon)?;
    let status = match select_exponents(&m) {
        Ok(k) if is_flat_boundary(m.mean_p, m.var_p) => {
            debug_assert_eq!(k, KernelParams::FLAT);
            SelectStatus::FlatBoundary
        }
        Ok(k) => SelectStatus::Valid(k),
        Err(Error::Validity(msg)) => SelectStatus::Invalid(msg),
        Err(e) => return Err(e),
    };
    Ok(SelectReport { epsilon, mean_p: m.mean_p, var_p: m.var_p, count: m.count, status })
}

pub fn write_select_report<W: Write>(w: W, r: &SelectReport) -> Result<()> {
    let (alpha, beta, status, rec) = match &r.status {
        SelectStatus::Valid(k) => (fmt_sig(k.alpha), fmt_sig(k.beta), "valid", "beta"),
        SelectStatus::FlatBoundary => ("0".into(), "0".into(), "flat_boundary", "flat"),
        SelectStatus::Invalid(_) => (String::new(), String::new(), "invalid", "flat"),
    };
    write_rows(
        w,
        &["alpha", "beta", "mean_p", "var_p", "count", "epsilon", "status", "recommendation"],
        &[vec![
            alpha,
            beta,
            fmt_sig(r.mean_p),
            fmt_sig(r.var_p),
            r.count.to_string(),
            fmt_sig(r.epsilon),
            status.into(),
            rec.into(),
        ]],
    )
}

/// The four reference rows followed by any extra deltas.
pub fn robustness_table(extra: &[f64]) -> Result<Vec<RobustnessRow>> {
    TABLE_DELTAS.iter().chain(extra).map(|&d| robustness_row(d)).collect()
}

pub fn write_robustness_table<W: Write>(w: W, rows: &[RobustnessRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![fmt_sig(r.delta), fmt_sig(r.range_lo), fmt_sig(r.range_hi), fmt_sig(r.scale), fmt_sig(r.efficiency)]
        })
        .collect();
    write_rows(w, &["delta", "range_lo", "range_hi", "sech", "efficiency"], &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub spec: VarianceSpec,
    pub beta: BetaRatio,
    pub truncated: Option<(f64, f64)>,
}

pub fn variance_report(spec: VarianceSpec, epsilon: Option<f64>) -> Result<VarianceReport> {
    let beta = variance_ratio_beta(&spec)?;
    let truncated = epsilon.map(|e| variance_ratio_beta_truncated(&spec, e).map(|r| (e, r))).transpose()?;
    Ok(VarianceReport { spec, beta, truncated })
}

pub fn write_variance_report<W: Write>(w: W, r: &VarianceReport) -> Result<()> {
    let mut header =
        vec!["alpha", "beta", "gamma1", "gamma2", "R", "reduction", "below_one", "B_weighted", "B_kernel", "B_second"];
    let b = &r.beta;
    let mut row = vec![
        fmt_sig(r.spec.alpha),
        fmt_sig(r.spec.beta),
        fmt_sig(r.spec.gamma1),
        fmt_sig(r.spec.gamma2),
        fmt_sig(b.ratio),
        fmt_sig(1.0 / b.ratio),
        (b.ratio < 1.0).to_string(),
        fmt_sig(b.weighted_moment),
        fmt_sig(b.kernel_mean),
        fmt_sig(b.second_moment),
    ];
    if let Some((e, t)) = r.truncated {
        header.extend(["epsilon", "R_truncated"]);
        row.extend([fmt_sig(e), fmt_sig(t)]);
    }
    write_rows(w, &header, &[row])
}

/// Points for the power-law fit: bins with a defined, positive SNR and a mean
/// pass rate strictly inside (0, 1).
pub fn fit_points(profile: &SnrProfile) -> Vec<(f64, f64)> {
    profile
        .bins
        .iter()
        .filter_map(|b| {
            let p = b.mean_p?;
            let s = b.snr?;
            (p > 0.0 && p < 1.0 && s > 0.0).then_some((p, s * s))
        })
        .collect()
}

pub fn fit_profile(profile: &SnrProfile) -> Result<(SnrModelFit, usize)> {
    let pts = fit_points(profile);
    Ok((fit_snr_model(&pts)?, pts.len()))
}

pub fn write_fit_report<W: Write>(w: W, fit: &SnrModelFit, points: usize) -> Result<()> {
    write_rows(
        w,
        &["a_prime", "b_prime", "c0", "c1", "delta", "efficiency_floor", "points"],
        &[vec![
            fmt_sig(fit.a_prime),
            fmt_sig(fit.b_prime),
            fmt_sig(fit.c0),
            fmt_sig(fit.c1),
            fmt_sig(fit.delta),
            fmt_sig(fit.efficiency_floor),
            points.to_string(),
        ]],
    )
}

// Simulator configuration file (TOML). Every key is optional; missing keys
// take the golden defaults.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    #[serde(default)]
    world: WorldSection,
    #[serde(default)]
    rollouts: RolloutSection,
    #[serde(default)]
    weighting: WeightingSection,
    #[serde(default)]
    training: TrainingSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldSection {
    num_problems: Option<usize>,
    num_anchors: Option<usize>,
    feature_dim: Option<usize>,
    vocab_size: Option<usize>,
    difficulty_spread: Option<f64>,
    teacher_sharpness: Option<f64>,
    skill_dim: Option<usize>,
    clusters: Option<usize>,
    cluster_spread: Option<f64>,
    skill_scale: Option<f64>,
    context_scale: Option<f64>,
    rule_scale: Option<f64>,
    prior_alignment: Option<f64>,
    intractable_fraction: Option<f64>,
    intractable_depth: Option<f64>,
    confusion_scale: Option<f64>,
    difficulty_center: Option<f64>,
    teacher_noise: Option<f64>,
    anchor_offset: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutSection {
    k: Option<usize>,
    eval_k: Option<usize>,
    temperature: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightingSection {
    scheme: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    floor: Option<f64>,
    recompute_interval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSection {
    loss: Option<String>,
    stage1_fraction: Option<f64>,
    reverse_estimator: Option<String>,
    reverse_samples: Option<usize>,
    learning_rate: Option<f64>,
    steps: Option<usize>,
    eval_interval: Option<usize>,
    minibatch_size: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

pub fn parse_config(text: &str) -> Result<SimConfig> {
    let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
    let mut c = SimConfig::default();
    set!(c.seed, f.seed);
    let w = f.world;
    set!(c.num_problems, w.num_problems);
    set!(c.num_anchors, w.num_anchors);
    set!(c.feature_dim, w.feature_dim);
    set!(c.vocab_size, w.vocab_size);
    set!(c.difficulty_spread, w.difficulty_spread);
    set!(c.teacher_sharpness, w.teacher_sharpness);
    let p: &mut WorldParams = &mut c.world;
    set!(p.skill_dim, w.skill_dim);
    set!(p.clusters, w.clusters);
    set!(p.cluster_spread, w.cluster_spread);
    set!(p.skill_scale, w.skill_scale);
    set!(p.context_scale, w.context_scale);
    set!(p.rule_scale, w.rule_scale);
    set!(p.prior_alignment, w.prior_alignment);
    set!(p.intractable_fraction, w.intractable_fraction);
    set!(p.intractable_depth, w.intractable_depth);
    set!(p.confusion_scale, w.confusion_scale);
    set!(p.difficulty_center, w.difficulty_center);
    set!(p.teacher_noise, w.teacher_noise);
    set!(p.anchor_offset, w.anchor_offset);
    set!(c.rollout_count, f.rollouts.k);
    set!(c.eval_rollouts, f.rollouts.eval_k);
    set!(c.rollout_temperature, f.rollouts.temperature);

    let wt = f.weighting;
    c.kernel = match wt.scheme.as_deref().unwrap_or("beta") {
        "beta" => WeightScheme::Beta(KernelParams { alpha: wt.alpha.unwrap_or(1.0), beta: wt.beta.unwrap_or(1.0) }),
        "hard_filter" => WeightScheme::HardFilter { lo: wt.lo.unwrap_or(0.2), hi: wt.hi.unwrap_or(0.8) },
        "unweighted" => WeightScheme::Unweighted,
        other => {
            return Err(Error::Config(format!(
                "weighting.scheme: unknown value {other:?} (beta, hard_filter, unweighted)"
            )))
        }
    };
    set!(c.weight_floor, wt.floor);
    c.recompute_interval = wt.recompute_interval;

    let tr = f.training;
    c.loss_direction = match tr.loss.as_deref().unwrap_or("forward") {
        "forward" => LossDirection::Forward,
        "reverse" => LossDirection::Reverse,
        "two_stage" => LossDirection::TwoStage { stage1_fraction: tr.stage1_fraction.unwrap_or(0.5) },
        other => {
            return Err(Error::Config(format!("training.loss: unknown value {other:?} (forward, reverse, two_stage)")))
        }
    };
    c.reverse_estimator = match tr.reverse_estimator.as_deref().unwrap_or("exact") {
        "exact" => ReverseEstimator::Exact,
        "sampled" => ReverseEstimator::Sampled { samples: tr.reverse_samples.unwrap_or(8) },
        other => {
            return Err(Error::Config(format!("training.reverse_estimator: unknown value {other:?} (exact, sampled)")))
        }
    };
    set!(c.learning_rate, tr.learning_rate);
    set!(c.steps, tr.steps);
    set!(c.eval_interval, tr.eval_interval);
    c.minibatch_size = tr.minibatch_size;
    c.validate()?;
    Ok(c)
}

/// Train from a fresh world, capturing per-problem gradient records at each
/// of `dump_steps` (measured before that step's update).
pub type GradientDump = (usize, Vec<GradientRecord>);

pub fn run_simulation(config: &SimConfig, dump_steps: &[usize]) -> Result<(SimMetrics, Vec<GradientDump>)> {
    config.validate()?;
    if let Some(&s) = dump_steps.iter().find(|&&s| s > config.steps) {
        return Err(Error::Config(format!("gradient dump step {s} exceeds training.steps = {}", config.steps)));
    }
    let mut world = build_world(config)?;
    let mut dumps = Vec::new();
    let metrics = train_observed(&mut world, config, |step, w| {
        if dump_steps.contains(&step) {
            let recs = measure_snr(w, config.stage_at(step), config.rollout_count, config.rollout_temperature, step);
            dumps.push((step, recs));
        }
    })?;
    Ok((metrics, dumps))
}
