use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmps_core::experiment::{
    self, AblationAxis, AttackOutput, ExperimentConfig, Method, Overrides, Victim,
};
use cmps_core::synthdata::Direction;

#[derive(Parser, Debug)]
#[command(
    name = "cmps",
    version,
    about = "Cross-modality universal perturbation lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_enum)]
    direction: Option<DirectionArg>,
    /// L∞ budget on the 0..255 pixel scale.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Grayscale augmentation probability.
    #[arg(long, global = true)]
    gray_prob: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out test datasets.
    GenData,
    /// Train a victim embedder.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `b` trains the independently seeded transfer victim.
        #[arg(long, value_enum, default_value = "a")]
        victim: VictimArg,
    },
    /// Compute and cache modality centroids.
    Centroids {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Learn a universal perturbation or run a per-image baseline.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Cached centroid table; recomputed when omitted.
        #[arg(long)]
        centroids: Option<PathBuf>,
    },
    /// Rank-k / mAP of a victim, clean or under a perturbation file.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        perturbation: Option<PathBuf>,
    },
    /// Apply a perturbation learned on one victim to another.
    Transfer {
        #[arg(long)]
        perturbation: PathBuf,
        /// Target victim; defaults to model_b.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Sweep epsilon or the grayscale probability.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Numerical check of the momentum-vs-plain descent inequality.
    TheoryCheck {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Data, victim, centroids, both universal attacks and the report.
    FullPipeline,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Cmps,
    Stepwise,
    Fgsm,
    Pgd,
    Mfgsm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cmps => Method::Cmps,
            MethodArg::Stepwise => Method::Stepwise,
            MethodArg::Fgsm => Method::Fgsm,
            MethodArg::Pgd => Method::Pgd,
            MethodArg::Mfgsm => Method::Mfgsm,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DirectionArg {
    V2i,
    I2v,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VictimArg {
    A,
    B,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    Epsilon,
    GrayProb,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
        method: common.method.map(Method::from),
        direction: match common.direction {
            Some(DirectionArg::V2i) => Some(Direction::VisibleToInfrared),
            Some(DirectionArg::I2v) => Some(Direction::InfraredToVisible),
            _ => None,
        },
        epsilon: common.epsilon,
        gray_prob: common.gray_prob,
    });
    if matches!(common.direction, Some(DirectionArg::Both)) {
        cfg.eval.directions = Direction::BOTH.to_vec();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let layout = cfg.layout();
    let ckpt_a = |c: Option<PathBuf>| c.unwrap_or_else(|| layout.checkpoint(Victim::A));
    match cli.command {
        Command::GenData => {
            let (train, test) = experiment::gen_data(&cfg)?;
            println!("{}", train.display());
            println!("{}", test.display());
        }
        Command::Train { dataset, victim } => {
            let v = match victim {
                VictimArg::A => Victim::A,
                VictimArg::B => Victim::B,
            };
            let out = experiment::train_victim(&cfg, dataset.as_deref(), v)?;
            println!("{}", out.display());
        }
        Command::Centroids {
            checkpoint,
            dataset,
        } => {
            let ds = dataset.unwrap_or_else(|| layout.train_dataset());
            let out = experiment::centroids(&cfg, &ckpt_a(checkpoint), &ds)?;
            println!("{}", out.display());
        }
        Command::Attack {
            checkpoint,
            dataset,
            centroids,
        } => match experiment::attack(
            &cfg,
            &ckpt_a(checkpoint),
            dataset.as_deref(),
            centroids.as_deref(),
        )? {
            AttackOutput::Universal(path) => println!("{}", path.display()),
            AttackOutput::PerImage { report, samples } => {
                println!("{}", report.display());
                println!("{}", samples.display());
            }
        },
        Command::Eval {
            checkpoint,
            dataset,
            perturbation,
        } => {
            let (out, rows) = experiment::eval(
                &cfg,
                &ckpt_a(checkpoint),
                dataset.as_deref(),
                perturbation.as_deref(),
            )?;
            for r in &rows {
                log::info!(
                    "{} {}: rank1 {:.2} rank10 {:.2} rank20 {:.2} mAP {:.2}",
                    r.method,
                    r.direction,
                    r.rank1,
                    r.rank10,
                    r.rank20,
                    r.map
                );
            }
            println!("{}", out.display());
        }
        Command::Transfer {
            perturbation,
            checkpoint,
            dataset,
        } => {
            let target = checkpoint.unwrap_or_else(|| layout.checkpoint(Victim::B));
            let (out, _) = experiment::transfer(&cfg, &perturbation, &target, dataset.as_deref())?;
            println!("{}", out.display());
        }
        Command::Ablate { axis, checkpoint } => {
            let axis = match axis {
                AxisArg::Epsilon => AblationAxis::Epsilon,
                AxisArg::GrayProb => AblationAxis::GrayProb,
            };
            let (out, _) = experiment::ablate(&cfg, axis, &ckpt_a(checkpoint), None, None)?;
            println!("{}", out.display());
        }
        Command::TheoryCheck { trials, dim } => {
            if let Some(t) = trials {
                cfg.theory.trials = t;
            }
            if let Some(d) = dim {
                cfg.theory.dim = d;
            }
            cfg.validate()?;
            let (out, report) = experiment::theory_check(&cfg)?;
            log::info!(
                "{}/{} trials satisfied (min margin {:.3e})",
                report.satisfied,
                report.trials,
                report.min_margin
            );
            println!("{}", out.display());
        }
        Command::FullPipeline => {
            experiment::full_pipeline(&cfg)?;
            println!("{}", layout.report_csv().display());
            println!("{}", layout.report_json().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("cmps failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
