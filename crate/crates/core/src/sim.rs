//! Synthetic single-token distillation world.
//!
//! Each problem is a feature vector `x_i` and an answer token `a_i`. The student
//! is a shared linear map `Θ` (F×V) plus a frozen per-problem logit offset that
//! sets the problem's initial difficulty; the teacher is a fixed distribution
//! peaked at `a_i`. Features split into a "skill" block, through which answers
//! follow a shared rule the student partly knows, and a "context" block that
//! carries no answer information but is shared with a set of held-out anchor
//! inputs. Drift in the context rows of Θ is what the retention metric sees.
//!
//! A fraction of problems are intractable: their answer ignores the rule and
//! their student logits carry random confusion, so their gradients point in
//! unrelated directions. These sit at low pass rate and are the problems the
//! Beta kernel suppresses.

use crate::error::{domain, Error, Result};
use crate::kernel::{kernel_weights, normalize_slice, KernelParams};
use crate::numerics::{log_softmax, softmax, softmax_into, stream_rng, StreamPurpose};
use crate::passrate::{hard_filter, histogram, RolloutRecord, CURRICULUM_EDGES};
use crate::snr_profile::GradientRecord;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    Beta(KernelParams),
    HardFilter { lo: f64, hi: f64 },
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossDirection {
    Forward,
    Reverse,
    TwoStage { stage1_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Forward,
    Reverse,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReverseEstimator {
    /// Exact expectation over the student distribution.
    Exact,
    /// Score-function estimate from this many student samples per problem.
    Sampled { samples: usize },
}

/// Structural knobs of the synthetic world. The defaults are frozen; the
/// golden configuration depends on them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub skill_dim: usize,
    pub clusters: usize,
    pub cluster_spread: f64,
    pub skill_scale: f64,
    pub context_scale: f64,
    pub rule_scale: f64,
    /// Correlation between the student's initial Θ and the answer rule.
    pub prior_alignment: f64,
    pub intractable_fraction: f64,
    /// Extra logit-odds penalty on intractable problems.
    pub intractable_depth: f64,
    pub confusion_scale: f64,
    /// Initial answer logit-odds of a problem of median difficulty.
    pub difficulty_center: f64,
    pub teacher_noise: f64,
    pub anchor_offset: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            skill_dim: 8,
            clusters: 4,
            cluster_spread: 0.6,
            skill_scale: 1.0,
            context_scale: 1.0,
            rule_scale: 3.0,
            prior_alignment: 0.7,
            intractable_fraction: 0.2,
            intractable_depth: 4.0,
            confusion_scale: 2.0,
            difficulty_center: 0.5,
            teacher_noise: 1.0,
            anchor_offset: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub num_problems: usize,
    pub num_anchors: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub difficulty_spread: f64,
    pub teacher_sharpness: f64,
    pub rollout_count: usize,
    /// Rollouts per problem for checkpoint telemetry.
    pub eval_rollouts: usize,
    pub rollout_temperature: f64,
    pub kernel: WeightScheme,
    pub weight_floor: f64,
    pub loss_direction: LossDirection,
    pub reverse_estimator: ReverseEstimator,
    pub learning_rate: f64,
    pub steps: usize,
    pub recompute_interval: Option<usize>,
    pub seed: u64,
    pub eval_interval: usize,
    pub minibatch_size: Option<usize>,
    pub world: WorldParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_problems: 200,
            num_anchors: 50,
            feature_dim: 16,
            vocab_size: 16,
            difficulty_spread: 4.0,
            teacher_sharpness: 6.0,
            rollout_count: 8,
            eval_rollouts: 32,
            rollout_temperature: 1.0,
            kernel: WeightScheme::Beta(KernelParams::DEFAULT),
            weight_floor: 0.0,
            loss_direction: LossDirection::Forward,
            reverse_estimator: ReverseEstimator::Exact,
            learning_rate: 2.0,
            steps: 100,
            recompute_interval: None,
            seed: 7,
            eval_interval: 20,
            minibatch_size: None,
            world: WorldParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return Err(domain(format!("vocab_size must be at least 2, got {}", self.vocab_size)));
        }
        if self.feature_dim < 1 {
            return Err(domain("feature_dim must be at least 1"));
        }
        for (k, v) in [
            ("num_problems", self.num_problems),
            ("num_anchors", self.num_anchors),
            ("rollout_count", self.rollout_count),
            ("eval_rollouts", self.eval_rollouts),
            ("eval_interval", self.eval_interval),
        ] {
            if v < 1 {
                return cfg(format!("{k} must be at least 1"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if !(self.rollout_temperature > 0.0) {
            return cfg(format!("rollout_temperature must be positive, got {}", self.rollout_temperature));
        }
        if !(self.teacher_sharpness > 0.0) {
            return cfg(format!("teacher_sharpness must be positive, got {}", self.teacher_sharpness));
        }
        if !(self.weight_floor >= 0.0) {
            return cfg("weight_floor must be nonnegative".into());
        }
        match self.kernel {
            WeightScheme::Beta(k) => k.validate()?,
            WeightScheme::HardFilter { lo, hi } => {
                hard_filter(0.5, lo, hi)?;
            }
            WeightScheme::Unweighted => {}
        }
        if let LossDirection::TwoStage { stage1_fraction: f } = self.loss_direction {
            if !(f > 0.0 && f < 1.0) {
                return cfg(format!("stage1_fraction must lie in (0,1), got {f}"));
            }
        }
        if let ReverseEstimator::Sampled { samples } = self.reverse_estimator {
            if samples < 2 {
                return cfg("reverse_samples must be at least 2".into());
            }
        }
        if self.recompute_interval == Some(0) {
            return cfg("recompute_interval must be positive".into());
        }
        if let Some(b) = self.minibatch_size {
            if b == 0 || b > self.num_problems {
                return cfg(format!("minibatch_size must lie in 1..={}", self.num_problems));
            }
        }
        let w = &self.world;
        if w.skill_dim < 1 || w.clusters < 1 {
            return cfg("world.skill_dim and world.clusters must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&w.prior_alignment) || !(0.0..=1.0).contains(&w.intractable_fraction) {
            return cfg("world.prior_alignment and world.intractable_fraction must lie in [0,1]".into());
        }
        Ok(())
    }

    /// Step at which a two-stage run switches to reverse KL.
    pub fn switch_step(&self) -> Option<usize> {
        match self.loss_direction {
            LossDirection::TwoStage { stage1_fraction } => Some((stage1_fraction * self.steps as f64).round() as usize),
            _ => None,
        }
    }

    pub fn stage_at(&self, step: usize) -> Stage {
        match self.loss_direction {
            LossDirection::Forward => Stage::Forward,
            LossDirection::Reverse => Stage::Reverse,
            LossDirection::TwoStage { .. } => {
                if step < self.switch_step().unwrap_or(0) {
                    Stage::Forward
                } else {
                    Stage::Reverse
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub num_features: usize,
    pub vocab: usize,
    /// N×F, row-major.
    pub features: Vec<f64>,
    pub answers: Vec<usize>,
    /// Frozen per-problem logit offsets, N×V.
    pub offsets: Vec<f64>,
    /// N×V.
    pub teacher_logits: Vec<f64>,
    /// Intractable problems (answer unrelated to the shared rule).
    pub intractable: Vec<bool>,
    pub anchor_features: Vec<f64>,
    pub anchor_offsets: Vec<f64>,
    /// Student distribution on each anchor at construction, M×V.
    pub anchor_targets: Vec<f64>,
    /// Student parameters, F×V, row-major.
    pub theta: Vec<f64>,
    pub seed: u64,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn build_world(config: &SimConfig) -> Result<SimWorld> {
    config.validate()?;
    let wp = &config.world;
    let (n, m, f, v) = (config.num_problems, config.num_anchors, config.feature_dim, config.vocab_size);
    let fs = wp.skill_dim.min(f.div_ceil(2)).max(1);
    let fc = f - fs;
    let mut rng = stream_rng(config.seed, StreamPurpose::World, 0, 0);

    let protos: Vec<f64> = (0..wp.clusters * fs).map(|_| normal(&mut rng)).collect();
    let cluster: Vec<usize> = (0..n).map(|_| rng.random_range(0..wp.clusters)).collect();
    let mut features = vec![0.0; n * f];
    for i in 0..n {
        for k in 0..fs {
            let s = protos[cluster[i] * fs + k] + wp.cluster_spread * normal(&mut rng);
            features[i * f + k] = s / (fs as f64).sqrt() * wp.skill_scale;
        }
    }
    for i in 0..n {
        for k in 0..fc {
            features[i * f + fs + k] = normal(&mut rng) / (fc as f64).sqrt() * wp.context_scale;
        }
    }

    // Answer rule: only the skill rows are nonzero.
    let mut rule = vec![0.0; f * v];
    for k in 0..f {
        for j in 0..v {
            let z = normal(&mut rng) * wp.rule_scale;
            if k < fs {
                rule[k * v + j] = z;
            }
        }
    }
    let logits_of = |theta: &[f64], x: &[f64]| -> Vec<f64> {
        let mut z = vec![0.0; v];
        for (k, xk) in x.iter().enumerate() {
            if *xk != 0.0 {
                for j in 0..v {
                    z[j] += xk * theta[k * v + j];
                }
            }
        }
        z
    };
    let argmax = |z: &[f64]| (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap_or(0);
    let rule_answer: Vec<usize> = (0..n).map(|i| argmax(&logits_of(&rule, &features[i * f..(i + 1) * f]))).collect();

    let difficulty: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let intractable: Vec<bool> = difficulty.iter().map(|d| *d > 1.0 - wp.intractable_fraction).collect();
    let shift: Vec<usize> = (0..n).map(|_| rng.random_range(1..v)).collect();
    let answers: Vec<usize> =
        (0..n).map(|i| if intractable[i] { (rule_answer[i] + shift[i]) % v } else { rule_answer[i] }).collect();

    let a = wp.prior_alignment;
    let b = (1.0 - a * a).sqrt();
    let theta: Vec<f64> = rule.iter().map(|r| a * r + b * normal(&mut rng) * wp.rule_scale).collect();

    let mut offsets = vec![0.0; n * v];
    for i in 0..n {
        for j in 0..v {
            let c = normal(&mut rng);
            if intractable[i] {
                offsets[i * v + j] = wp.confusion_scale * c;
            }
        }
    }
    // Shift the answer logit so the initial answer logit-odds hit the target.
    for i in 0..n {
        let mut z = logits_of(&theta, &features[i * f..(i + 1) * f]);
        for j in 0..v {
            z[j] += offsets[i * v + j];
        }
        let ai = answers[i];
        let others: Vec<f64> = (0..v).filter(|&j| j != ai).map(|j| z[j]).collect();
        let target = wp.difficulty_center + config.difficulty_spread * (1.0 - 2.0 * difficulty[i])
            - if intractable[i] { wp.intractable_depth } else { 0.0 };
        offsets[i * v + ai] += target - z[ai] + crate::numerics::log_sum_exp(&others);
    }

    let mut teacher_logits = vec![0.0; n * v];
    for i in 0..n {
        for j in 0..v {
            let peak = if j == answers[i] { config.teacher_sharpness } else { 0.0 };
            teacher_logits[i * v + j] = peak + wp.teacher_noise * normal(&mut rng);
        }
    }

    let mut anchor_features = vec![0.0; m * f];
    for r in 0..m {
        for k in 0..fc {
            anchor_features[r * f + fs + k] = normal(&mut rng) / (fc as f64).sqrt() * wp.context_scale;
        }
    }
    let mut anchor_offsets = vec![0.0; m * v];
    for r in 0..m {
        let tok = rng.random_range(0..v);
        anchor_offsets[r * v + tok] = wp.anchor_offset;
    }

    let mut world = SimWorld {
        num_features: f,
        vocab: v,
        features,
        answers,
        offsets,
        teacher_logits,
        intractable,
        anchor_features,
        anchor_offsets,
        anchor_targets: vec![0.0; m * v],
        theta,
        seed: config.seed,
    };
    for r in 0..m {
        let p = softmax(&world.anchor_logits(r));
        world.anchor_targets[r * v..(r + 1) * v].copy_from_slice(&p);
    }
    Ok(world)
}

impl SimWorld {
    pub fn num_problems(&self) -> usize {
        self.answers.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_offsets.len() / self.vocab
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    fn linear(&self, x: &[f64], offset: &[f64]) -> Vec<f64> {
        let v = self.vocab;
        let mut z = offset.to_vec();
        for (k, xk) in x.iter().enumerate() {
            if *xk != 0.0 {
                let row = &self.theta[k * v..(k + 1) * v];
                for j in 0..v {
                    z[j] += xk * row[j];
                }
            }
        }
        z
    }

    pub fn student_logits(&self, i: usize) -> Vec<f64> {
        let v = self.vocab;
        self.linear(self.x(i), &self.offsets[i * v..(i + 1) * v])
    }

    pub fn teacher_probs(&self, i: usize) -> Vec<f64> {
        softmax(&self.teacher_logits[i * self.vocab..(i + 1) * self.vocab])
    }

    pub fn anchor_logits(&self, r: usize) -> Vec<f64> {
        let (f, v) = (self.num_features, self.vocab);
        self.linear(&self.anchor_features[r * f..(r + 1) * f], &self.anchor_offsets[r * v..(r + 1) * v])
    }

    /// Exact probability that a rollout at `temperature` answers problem `i` correctly.
    pub fn answer_prob(&self, i: usize, temperature: f64) -> f64 {
        let z: Vec<f64> = self.student_logits(i).iter().map(|x| x / temperature).collect();
        softmax(&z)[self.answers[i]]
    }

    pub fn problem_id(i: usize) -> String {
        format!("p{i:04}")
    }
}

/// Outer product `x ⊗ dz` as an F×V matrix.
fn outer(x: &[f64], dz: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len() * dz.len()];
    for (k, xk) in x.iter().enumerate() {
        for (j, d) in dz.iter().enumerate() {
            g[k * dz.len() + j] = xk * d;
        }
    }
    g
}

fn forward_logit_grad(world: &SimWorld, i: usize) -> (f64, Vec<f64>) {
    let ls = log_softmax(&world.student_logits(i));
    let lt = log_softmax(&world.teacher_logits[i * world.vocab..(i + 1) * world.vocab]);
    let pt: Vec<f64> = lt.iter().map(|x| x.exp()).collect();
    let loss = pt.iter().zip(lt.iter().zip(&ls)).map(|(p, (a, b))| if *p > 0.0 { p * (a - b) } else { 0.0 }).sum();
    let dz = ls.iter().zip(&pt).map(|(l, p)| l.exp() - p).collect();
    (loss, dz)
}

fn reverse_logit_grad(world: &SimWorld, i: usize) -> (f64, Vec<f64>) {
    let ls = log_softmax(&world.student_logits(i));
    let lt = log_softmax(&world.teacher_logits[i * world.vocab..(i + 1) * world.vocab]);
    let ps: Vec<f64> = ls.iter().map(|x| x.exp()).collect();
    let ratio: Vec<f64> = ls.iter().zip(&lt).map(|(a, b)| a - b).collect();
    let loss: f64 = ps.iter().zip(&ratio).map(|(p, r)| p * r).sum();
    let dz = ps.iter().zip(&ratio).map(|(p, r)| p * (r - loss)).collect();
    (loss, dz)
}

/// KL(teacher ‖ student) on problem `i` and its gradient in Θ (F×V).
pub fn forward_kl(world: &SimWorld, i: usize) -> (f64, Vec<f64>) {
    let (loss, dz) = forward_logit_grad(world, i);
    (loss, outer(world.x(i), &dz))
}

/// KL(student ‖ teacher) on problem `i`, exact over the student distribution.
pub fn reverse_kl(world: &SimWorld, i: usize) -> (f64, Vec<f64>) {
    let (loss, dz) = reverse_logit_grad(world, i);
    (loss, outer(world.x(i), &dz))
}

/// Score-function estimate of the reverse-KL logit gradient from `s` student
/// samples with a leave-one-out baseline. Returns the exact loss alongside.
fn reverse_logit_grad_sampled(world: &SimWorld, i: usize, s: usize, step: usize) -> (f64, Vec<f64>) {
    let (loss, _) = reverse_logit_grad(world, i);
    let ls = log_softmax(&world.student_logits(i));
    let lt = log_softmax(&world.teacher_logits[i * world.vocab..(i + 1) * world.vocab]);
    let ps: Vec<f64> = ls.iter().map(|x| x.exp()).collect();
    let mut rng = stream_rng(world.seed, StreamPurpose::Sampled, i as u64, step as u64);
    let ys: Vec<usize> = (0..s).map(|_| sample_token(&ps, &mut rng)).collect();
    let f: Vec<f64> = ys.iter().map(|&y| ls[y] - lt[y]).collect();
    let total: f64 = f.iter().sum();
    let mut dz = vec![0.0; world.vocab];
    for (y, fy) in ys.iter().zip(&f) {
        let baseline = (total - fy) / (s - 1) as f64;
        let c = (fy - baseline) / s as f64;
        for j in 0..world.vocab {
            dz[j] -= c * ps[j];
        }
        dz[*y] += c;
    }
    (loss, dz)
}

fn sample_token<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the cumulative total; take the last token with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn rollouts_with(
    world: &SimWorld,
    k: usize,
    temperature: f64,
    purpose: StreamPurpose,
    step: usize,
) -> Vec<RolloutRecord> {
    let mut probs = vec![0.0; world.vocab];
    (0..world.num_problems())
        .map(|i| {
            let z: Vec<f64> = world.student_logits(i).iter().map(|x| x / temperature).collect();
            softmax_into(&z, &mut probs);
            let mut rng = stream_rng(world.seed, purpose, i as u64, step as u64);
            let outcomes = (0..k).map(|_| sample_token(&probs, &mut rng) == world.answers[i]).collect();
            RolloutRecord { problem_id: SimWorld::problem_id(i), outcomes }
        })
        .collect()
}

/// K sampled answers per problem; outcome is whether the token equals the answer.
pub fn run_rollouts(world: &SimWorld, k: usize, temperature: f64, step: usize) -> Vec<RolloutRecord> {
    rollouts_with(world, k, temperature, StreamPurpose::Rollout, step)
}

fn pass_rates(records: &[RolloutRecord]) -> Vec<f64> {
    records.iter().map(|r| r.outcomes.iter().filter(|&&o| o).count() as f64 / r.outcomes.len() as f64).collect()
}

/// Mean KL(initial anchor distribution ‖ current student) over anchors.
pub fn retention(world: &SimWorld) -> f64 {
    let v = world.vocab;
    let m = world.num_anchors();
    let total: f64 = (0..m)
        .map(|r| {
            let q = log_softmax(&world.anchor_logits(r));
            let p = &world.anchor_targets[r * v..(r + 1) * v];
            p.iter().zip(&q).map(|(pj, qj)| if *pj > 0.0 { pj * (pj.ln() - qj) } else { 0.0 }).sum::<f64>()
        })
        .sum();
    (total / m as f64).max(0.0)
}

/// One flattened gradient per problem with fresh pass-rate estimates.
pub fn measure_snr(world: &SimWorld, stage: Stage, k: usize, temperature: f64, step: usize) -> Vec<GradientRecord> {
    let ps = pass_rates(&rollouts_with(world, k, temperature, StreamPurpose::SnrRollout, step));
    (0..world.num_problems())
        .map(|i| {
            let (_, g) = match stage {
                Stage::Forward => forward_kl(world, i),
                Stage::Reverse => reverse_kl(world, i),
            };
            GradientRecord { problem_id: SimWorld::problem_id(i), pass_rate: ps[i], gradient: g }
        })
        .collect()
}

/// Raw (unnormalized) per-problem weights for a scheme.
pub fn scheme_weights(scheme: WeightScheme, ps: &[f64], floor: f64) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::Beta(k) => kernel_weights(ps, k, floor),
        WeightScheme::HardFilter { lo, hi } => {
            ps.iter().map(|&p| hard_filter(p, lo, hi).map(|keep| if keep { 1.0 } else { 0.0 })).collect()
        }
        WeightScheme::Unweighted => Ok(vec![1.0; ps.len()]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub mean_p: f64,
    /// Low [0,0.2), Med [0.2,0.8), High [0.8,1].
    pub histogram: [f64; 3],
    pub retention: f64,
    /// Weighted mean loss under the active stage and current weights.
    pub loss: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub checkpoints: Vec<Checkpoint>,
    /// Steps at which pass rates and weights were recomputed after step 0.
    pub recompute_steps: Vec<usize>,
}

fn stage_loss_grad(world: &SimWorld, stage: Stage, est: ReverseEstimator, i: usize, step: usize) -> (f64, Vec<f64>) {
    match (stage, est) {
        (Stage::Forward, _) => forward_logit_grad(world, i),
        (Stage::Reverse, ReverseEstimator::Exact) => reverse_logit_grad(world, i),
        (Stage::Reverse, ReverseEstimator::Sampled { samples }) => reverse_logit_grad_sampled(world, i, samples, step),
    }
}

fn weighted_loss(world: &SimWorld, stage: Stage, weights: &[f64]) -> f64 {
    let n = world.num_problems();
    (0..n)
        .map(|i| {
            let l = match stage {
                Stage::Forward => forward_logit_grad(world, i).0,
                Stage::Reverse => reverse_logit_grad(world, i).0,
            };
            weights[i] * l
        })
        .sum::<f64>()
        / n as f64
}

fn checkpoint(world: &SimWorld, config: &SimConfig, step: usize, weights: &[f64]) -> Result<Checkpoint> {
    // Telemetry rollouts reuse the same random numbers at every checkpoint, so
    // changes in mean_p reflect the student rather than resampling noise.
    let ps = pass_rates(&rollouts_with(
        world,
        config.eval_rollouts,
        config.rollout_temperature,
        StreamPurpose::EvalRollout,
        0,
    ));
    let h = histogram(&ps, &CURRICULUM_EDGES)?;
    let stage = config.stage_at(step);
    Ok(Checkpoint {
        step,
        mean_p: h.mean_p,
        histogram: [h.fractions[0], h.fractions[1], h.fractions[2]],
        retention: retention(world),
        loss: weighted_loss(world, stage, weights),
        stage,
    })
}

/// One gradient step on the weighted mean loss.
fn update(world: &mut SimWorld, config: &SimConfig, weights: &[f64], step: usize) {
    let (f, v) = (world.num_features, world.vocab);
    let n = world.num_problems();
    let stage = config.stage_at(step);
    let batch: Vec<usize> = match config.minibatch_size {
        None => (0..n).collect(),
        Some(b) => {
            let mut rng = stream_rng(config.seed, StreamPurpose::Minibatch, 0, step as u64);
            let mut idx = sample_indices(&mut rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let mut grad = vec![0.0; f * v];
    for &i in &batch {
        if weights[i] == 0.0 {
            continue;
        }
        let (_, dz) = stage_loss_grad(world, stage, config.reverse_estimator, i, step);
        let x = world.x(i);
        for k in 0..f {
            let c = weights[i] * x[k];
            if c != 0.0 {
                for j in 0..v {
                    grad[k * v + j] += c * dz[j];
                }
            }
        }
    }
    let scale = config.learning_rate / batch.len() as f64;
    for (t, g) in world.theta.iter_mut().zip(&grad) {
        *t -= scale * g;
    }
}

fn fresh_weights(world: &SimWorld, config: &SimConfig, step: usize) -> Result<Vec<f64>> {
    let ps = pass_rates(&run_rollouts(world, config.rollout_count, config.rollout_temperature, step));
    Ok(normalize_slice(&scheme_weights(config.kernel, &ps, config.weight_floor)?))
}

/// Run the configured schedule; `observe` sees the world at every step
/// before that step's update (and once more after the last one).
pub fn train_observed(
    world: &mut SimWorld,
    config: &SimConfig,
    mut observe: impl FnMut(usize, &SimWorld),
) -> Result<SimMetrics> {
    config.validate()?;
    let switch = config.switch_step();
    let mut weights = fresh_weights(world, config, 0)?;
    let mut recompute_steps = Vec::new();
    run_loop(world, config, &mut weights, &mut observe, |world, step, weights| {
        let due = config.recompute_interval.is_some_and(|r| step % r == 0) || switch == Some(step);
        if due {
            *weights = fresh_weights(world, config, step)?;
            recompute_steps.push(step);
        }
        Ok(())
    })
    .map(|checkpoints| SimMetrics { checkpoints, recompute_steps })
}

pub fn train(world: &mut SimWorld, config: &SimConfig) -> Result<SimMetrics> {
    train_observed(world, config, |_, _| {})
}

/// Train with caller-supplied per-problem weights held fixed for the whole run.
pub fn train_fixed_weights(world: &mut SimWorld, config: &SimConfig, weights: &[f64]) -> Result<SimMetrics> {
    config.validate()?;
    if weights.len() != world.num_problems() {
        return Err(domain("one weight per problem required"));
    }
    let mut w = weights.to_vec();
    run_loop(world, config, &mut w, &mut |_, _| {}, |_, _, _| Ok(()))
        .map(|checkpoints| SimMetrics { checkpoints, recompute_steps: Vec::new() })
}

fn run_loop(
    world: &mut SimWorld,
    config: &SimConfig,
    weights: &mut Vec<f64>,
    observe: &mut impl FnMut(usize, &SimWorld),
    mut before_step: impl FnMut(&SimWorld, usize, &mut Vec<f64>) -> Result<()>,
) -> Result<Vec<Checkpoint>> {
    let mut checkpoints = Vec::new();
    for step in 0..=config.steps {
        if step > 0 && step < config.steps {
            before_step(world, step, weights)?;
        }
        if step % config.eval_interval == 0 || step == config.steps {
            checkpoints.push(checkpoint(world, config, step, weights)?);
        }
        observe(step, world);
        if step == config.steps {
            break;
        }
        update(world, config, weights, step);
    }
    Ok(checkpoints)
}

/// Rows `step,stage,mean_p,low,med,high,retention,loss`.
pub fn write_metrics<W: std::io::Write>(writer: W, metrics: &SimMetrics) -> Result<()> {
    use crate::numerics::fmt_sig;
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["step", "stage", "mean_p", "low", "med", "high", "retention", "loss"]).map_err(io)?;
    for c in &metrics.checkpoints {
        w.write_record([
            c.step.to_string(),
            c.stage.label().to_string(),
            fmt_sig(c.mean_p),
            fmt_sig(c.histogram[0]),
            fmt_sig(c.histogram[1]),
            fmt_sig(c.histogram[2]),
            fmt_sig(c.retention),
            fmt_sig(c.loss),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            num_problems: 40,
            num_anchors: 8,
            feature_dim: 6,
            vocab_size: 5,
            steps: 6,
            eval_interval: 2,
            ..SimConfig::default()
        }
    }

    fn two_token_world(ps: [f64; 2], pt: [f64; 2]) -> SimWorld {
        let mut w = build_world(&SimConfig {
            num_problems: 1,
            num_anchors: 1,
            feature_dim: 1,
            vocab_size: 2,
            ..SimConfig::default()
        })
        .unwrap();
        w.features = vec![1.0];
        w.theta = vec![0.0, 0.0];
        w.offsets = vec![ps[0].ln(), ps[1].ln()];
        w.teacher_logits = vec![pt[0].ln(), pt[1].ln()];
        w
    }

    #[test]
    fn forward_kl_examples() {
        let w = two_token_world([0.5, 0.5], [1.0, 1e-300]);
        let (loss, g) = forward_kl(&w, 0);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let w = two_token_world([0.3, 0.7], [0.3, 0.7]);
        let (loss, g) = forward_kl(&w, 0);
        assert!(loss.abs() < 1e-15 && g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn reverse_kl_examples() {
        let w = two_token_world([0.5, 0.5], [0.9, 0.1]);
        let (loss, _) = reverse_kl(&w, 0);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.5108).abs() < 1e-4);
        let w = two_token_world([0.3, 0.7], [0.3, 0.7]);
        let (loss, g) = reverse_kl(&w, 0);
        assert!(loss.abs() < 1e-15 && g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn sampled_reverse_is_unbiased() {
        let w = two_token_world([0.4, 0.6], [0.9, 0.1]);
        let (_, exact) = reverse_logit_grad(&w, 0);
        let reps = 4000;
        let mut mean = [0.0; 2];
        for s in 0..reps {
            let (_, g) = reverse_logit_grad_sampled(&w, 0, 4, s);
            mean[0] += g[0] / reps as f64;
            mean[1] += g[1] / reps as f64;
        }
        assert!((mean[0] - exact[0]).abs() < 0.02, "{mean:?} vs {exact:?}");
        assert!((mean[1] - exact[1]).abs() < 0.02);
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        let c = small();
        assert_eq!(build_world(&c).unwrap(), build_world(&c).unwrap());
        assert!(build_world(&SimConfig { vocab_size: 1, ..small() }).is_err());
        assert!(build_world(&SimConfig { feature_dim: 0, ..small() }).is_err());
        let other = build_world(&SimConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(build_world(&c).unwrap().theta, other.theta);
    }

    #[test]
    fn sharp_teacher_peaks_at_answer() {
        let w = build_world(&SimConfig { teacher_sharpness: 200.0, ..small() }).unwrap();
        for i in 0..w.num_problems() {
            let p = w.teacher_probs(i);
            let am = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(am, w.answers[i]);
        }
    }

    #[test]
    fn retention_zero_then_positive() {
        let mut w = build_world(&small()).unwrap();
        assert!(retention(&w) < 1e-15);
        for (k, t) in w.theta.iter_mut().enumerate() {
            *t += 0.3 * ((k as f64) * 1.7).sin();
        }
        assert!(retention(&w) > 0.0);
    }

    #[test]
    fn greedy_limit_rollouts() {
        let w = build_world(&small()).unwrap();
        let recs = run_rollouts(&w, 16, 1e-4, 0);
        for (i, r) in recs.iter().enumerate() {
            let z = w.student_logits(i);
            let am = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            let expect = am == w.answers[i];
            assert!(r.outcomes.iter().all(|&o| o == expect));
        }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let c = SimConfig { learning_rate: 0.0, ..small() };
        let mut w = build_world(&c).unwrap();
        let before = w.theta.clone();
        let m = train(&mut w, &c).unwrap();
        assert_eq!(w.theta, before);
        let first = &m.checkpoints[0];
        assert!(first.retention < 1e-15);
        assert!(m.checkpoints.iter().all(|cp| (cp.mean_p, cp.histogram, cp.retention, cp.loss)
            == (first.mean_p, first.histogram, first.retention, first.loss)));
    }

    #[test]
    fn checkpoints_include_zero_and_end() {
        let c = SimConfig { steps: 7, eval_interval: 3, ..small() };
        let mut w = build_world(&c).unwrap();
        let m = train(&mut w, &c).unwrap();
        let steps: Vec<usize> = m.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 7]);
    }

    #[test]
    fn recompute_and_switch_schedule() {
        let c = SimConfig { steps: 10, recompute_interval: Some(4), ..small() };
        let mut w = build_world(&c).unwrap();
        assert_eq!(train(&mut w, &c).unwrap().recompute_steps, vec![4, 8]);
        let c = SimConfig { steps: 10, loss_direction: LossDirection::TwoStage { stage1_fraction: 0.3 }, ..small() };
        let mut w = build_world(&c).unwrap();
        let m = train(&mut w, &c).unwrap();
        assert_eq!(m.recompute_steps, vec![3]);
        assert_eq!(c.stage_at(2), Stage::Forward);
        assert_eq!(c.stage_at(3), Stage::Reverse);
    }

    #[test]
    fn minibatch_mode_runs_and_is_deterministic() {
        let c = SimConfig { minibatch_size: Some(10), ..small() };
        let mut a = build_world(&c).unwrap();
        let mut b = build_world(&c).unwrap();
        assert_eq!(train(&mut a, &c).unwrap(), train(&mut b, &c).unwrap());
        assert_eq!(a.theta, b.theta);
        assert!(build_world(&SimConfig { minibatch_size: Some(0), ..small() }).is_err());
    }

    #[test]
    fn metrics_table_format() {
        let c = small();
        let mut w = build_world(&c).unwrap();
        let m = train(&mut w, &c).unwrap();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,stage,mean_p,low,med,high,retention,loss\n0,forward,"));
        assert_eq!(text.lines().count(), m.checkpoints.len() + 1);
    }
}
