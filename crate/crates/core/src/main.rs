use cadistill::cli::{self, SelectStatus};
use cadistill::kernel::KernelParams;
use cadistill::sim::{LossDirection, WeightScheme};
use cadistill::snr_profile::{self, bell_shape_score, compute_snr_bins, normalize_profile};
use cadistill::variance::{gamma_from_signal, VarianceSpec};
use cadistill::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cadistill", version, about = "Pass-rate weighting, SNR diagnostics and a toy distillation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-problem weights from a rollout file (JSON lines).
    Weight {
        rollouts: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
        /// Minimum raw weight.
        #[arg(long, default_value_t = 0.0)]
        floor: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Moment-matched kernel exponents from the in-band pass rates.
    SelectExponents {
        rollouts: PathBuf,
        /// Pass rates outside [epsilon, 1 - epsilon] are ignored.
        #[arg(long, default_value_t = 0.125)]
        epsilon: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Robustness table: reference deltas plus any given ones.
    Robustness {
        #[arg(long = "delta")]
        deltas: Vec<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Closed-form variance ratio for Beta-family kernel and signal.
    VarianceRatio {
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, allow_hyphen_values = true, required_unless_present = "a_s")]
        gamma1: Option<f64>,
        #[arg(long, allow_hyphen_values = true, required_unless_present = "b_s")]
        gamma2: Option<f64>,
        /// Signal exponents instead of gammas: gamma1 = 2 a_s - a_prime, gamma2 = 2 b_s - b_prime.
        #[arg(long, requires_all = ["b_s", "a_prime", "b_prime"], conflicts_with_all = ["gamma1", "gamma2"])]
        a_s: Option<f64>,
        #[arg(long)]
        b_s: Option<f64>,
        #[arg(long)]
        a_prime: Option<f64>,
        #[arg(long)]
        b_prime: Option<f64>,
        /// Also report the ratio restricted to [epsilon, 1 - epsilon].
        #[arg(long)]
        epsilon: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Binned gradient SNR from a gradient CSV.
    SnrProfile {
        gradients: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Power-law fit of squared SNR against pass rate, from a profile CSV.
    FitSnr {
        profile: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the toy distillation simulator.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct OutArg {
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KernelArgs {
    /// Kernel exponent on p (default 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Kernel exponent on 1 - p (default 1).
    #[arg(long)]
    beta: Option<f64>,
    /// Indicator weights on [LO, HI] instead of the Beta kernel.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], conflicts_with_all = ["alpha", "beta", "unweighted"])]
    hard_filter: Option<Vec<f64>>,
    /// Unit weights.
    #[arg(long, conflicts_with_all = ["alpha", "beta"])]
    unweighted: bool,
}

impl KernelArgs {
    /// `None` when no weighting flag was given.
    fn scheme(&self) -> Option<WeightScheme> {
        if let Some(v) = &self.hard_filter {
            return Some(WeightScheme::HardFilter { lo: v[0], hi: v[1] });
        }
        if self.unweighted {
            return Some(WeightScheme::Unweighted);
        }
        if self.alpha.is_none() && self.beta.is_none() {
            return None;
        }
        Some(WeightScheme::Beta(KernelParams { alpha: self.alpha.unwrap_or(1.0), beta: self.beta.unwrap_or(1.0) }))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Forward,
    Reverse,
    #[value(name = "two_stage", alias = "two-stage")]
    TwoStage,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config; omitted keys take the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rollouts per problem for weight estimation.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Loss schedule.
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    /// Fraction of steps trained with forward KL before switching (two_stage only).
    #[arg(long)]
    stage1_fraction: Option<f64>,
    /// Re-estimate pass rates and weights every N steps.
    #[arg(long)]
    recompute_interval: Option<usize>,
    /// Number of gradient steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for gradient CSVs at step 0 and at --dump-step.
    #[arg(long)]
    dump_gradients: Option<PathBuf>,
    /// Second gradient dump step.
    #[arg(long, default_value_t = 20)]
    dump_step: usize,
    /// Also write SNR profiles of the dumps with this many bins.
    #[arg(long)]
    bins: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn output(out: &OutArg) -> Result<Box<dyn Write>> {
    Ok(match &out.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Weight { rollouts, kernel, floor, out } => {
            let records = cli::read_rollouts(open(&rollouts)?)?;
            let scheme = kernel.scheme().unwrap_or(WeightScheme::Beta(KernelParams::DEFAULT));
            let (rows, wv) = cli::weight_table(&records, scheme, floor)?;
            if wv.degenerate {
                eprintln!("warning: all weights are zero; normalized weights reported as zero");
            }
            cli::write_weight_table(output(&out)?, &rows)
        }
        Cmd::SelectExponents { rollouts, epsilon, out } => {
            let records = cli::read_rollouts(open(&rollouts)?)?;
            let report = cli::select_report(&records, epsilon)?;
            if let SelectStatus::Invalid(msg) = &report.status {
                eprintln!("warning: {msg}");
            }
            if let SelectStatus::Valid(k) = report.status {
                if k.alpha < 0.0 || k.beta < 0.0 {
                    eprintln!("warning: negative exponent; the kernel diverges at a boundary and cannot be used for weighting");
                }
            }
            cli::write_select_report(output(&out)?, &report)
        }
        Cmd::Robustness { deltas, out } => cli::write_robustness_table(output(&out)?, &cli::robustness_table(&deltas)?),
        Cmd::VarianceRatio { alpha, beta, gamma1, gamma2, a_s, b_s, a_prime, b_prime, epsilon, out } => {
            let (g1, g2) = match (a_s, b_s, a_prime, b_prime) {
                (Some(a), Some(b), Some(ap), Some(bp)) => gamma_from_signal(a, b, ap, bp),
                _ => (gamma1.unwrap_or_default(), gamma2.unwrap_or_default()),
            };
            let spec = VarianceSpec { alpha, beta, gamma1: g1, gamma2: g2 };
            cli::write_variance_report(output(&out)?, &cli::variance_report(spec, epsilon)?)
        }
        Cmd::SnrProfile { gradients, bins, out } => {
            let records = snr_profile::read_gradient_records(open(&gradients)?)?;
            let profile = normalize_profile(&compute_snr_bins(&records, bins)?)?;
            snr_profile::write_profile(output(&out)?, &profile)?;
            let line = match bell_shape_score(&profile) {
                Ok(b) => format!(
                    "bell: is_bell={} mid_over_edge_ratio={} mid_bins={} edge_bins={}",
                    b.is_bell,
                    cadistill::numerics::fmt_sig(b.mid_over_edge_ratio),
                    b.mid_bins,
                    b.edge_bins
                ),
                Err(e) => format!("bell: unavailable ({e})"),
            };
            if out.out.is_some() {
                println!("{line}");
            } else {
                eprintln!("{line}");
            }
            Ok(())
        }
        Cmd::FitSnr { profile, out } => {
            let profile = snr_profile::read_profile(open(&profile)?)?;
            let (fit, n) = cli::fit_profile(&profile)?;
            cli::write_fit_report(output(&out)?, &fit, n)
        }
        Cmd::Simulate(a) => simulate(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            cli::parse_config(&std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)?
        }
        None => Default::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(k) = a.k {
        config.rollout_count = k;
    }
    if let Some(s) = a.kernel.scheme() {
        config.kernel = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if a.recompute_interval.is_some() {
        config.recompute_interval = a.recompute_interval;
    }
    let fraction = a.stage1_fraction.or(match config.loss_direction {
        LossDirection::TwoStage { stage1_fraction } => Some(stage1_fraction),
        _ => None,
    });
    match a.schedule {
        Some(Schedule::Forward) => config.loss_direction = LossDirection::Forward,
        Some(Schedule::Reverse) => config.loss_direction = LossDirection::Reverse,
        Some(Schedule::TwoStage) => {
            config.loss_direction = LossDirection::TwoStage { stage1_fraction: fraction.unwrap_or(0.5) }
        }
        None => {
            if let (Some(f), LossDirection::TwoStage { .. }) = (a.stage1_fraction, config.loss_direction) {
                config.loss_direction = LossDirection::TwoStage { stage1_fraction: f };
            } else if a.stage1_fraction.is_some() {
                return Err(Error::Config("--stage1-fraction requires the two_stage schedule".into()));
            }
        }
    }
    let dump_steps: Vec<usize> = match &a.dump_gradients {
        Some(_) => {
            let mut v = vec![0, a.dump_step];
            v.dedup();
            v
        }
        None => Vec::new(),
    };
    let (metrics, dumps) = cli::run_simulation(&config, &dump_steps)?;
    if let Some(dir) = &a.dump_gradients {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        for (step, recs) in &dumps {
            snr_profile::write_gradient_records(create(&dir.join(format!("gradients_step{step}.csv")))?, recs)?;
            if let Some(bins) = a.bins {
                let profile = normalize_profile(&compute_snr_bins(recs, bins)?)?;
                snr_profile::write_profile(create(&dir.join(format!("profile_step{step}.csv")))?, &profile)?;
            }
        }
    }
    if !metrics.recompute_steps.is_empty() {
        eprintln!("info: weights recomputed at steps {:?}", metrics.recompute_steps);
    }
    cadistill::sim::write_metrics(output(&a.out)?, &metrics)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
