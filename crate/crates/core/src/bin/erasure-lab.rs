use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erasure_lab::error::Result;
use erasure_lab::harness::{self, run, Context, EraseOptions, ModelChoice, RunConfig};

#[derive(Parser)]
#[command(name = "erasure-lab", version, about = "Adversarial concept erasure on 2D diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppresses progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Base,
    Erased,
    Latest,
}

impl From<Which> for ModelChoice {
    fn from(w: Which) -> Self {
        match w {
            Which::Base => ModelChoice::Base,
            Which::Erased => ModelChoice::Erased,
            Which::Latest => ModelChoice::Latest,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample the labelled training and held-out sets.
    GenData(Common),
    /// Train the conditional base model and calibrate metrics on it.
    TrainBase(Common),
    /// Run the erasure loop on the base model.
    Erase {
        #[command(flatten)]
        common: Common,
        /// Continue from the last partial checkpoint.
        #[arg(long)]
        resume: bool,
        /// Pause after this many iterations.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
        #[arg(long, value_name = "N", default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Accuracy, fidelity, alignment and H for the base and erased models.
    Evaluate(Common),
    /// Leakage bound audit with the bound-ordering check.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "latest")]
        model: Which,
    },
    /// Adaptive attacks over the configured query budgets and strategies.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "latest")]
        model: Which,
    },
    /// Trade-off sweep over lambda and the ablation repetitions.
    Sweep(Common),
    /// Render CSV and SVG plots from the run directory.
    Report(Common),
}

fn context(common: &Common, name: &str) -> Result<Context> {
    let mut cfg = match &common.config {
        Some(p) => harness::parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Context::new(cfg, name, common.quiet)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => run::gen_data(&context(&c, "gen-data")?),
        Command::TrainBase(c) => run::train_base_phase(&context(&c, "train-base")?),
        Command::Erase {
            common,
            resume,
            stop_after,
            checkpoint_every,
        } => run::erase(
            &context(&common, "erase")?,
            EraseOptions {
                resume,
                stop_after,
                checkpoint_every,
            },
        ),
        Command::Evaluate(c) => run::evaluate(&context(&c, "evaluate")?),
        Command::Audit { common, model } => run::audit(&context(&common, "audit")?, model.into()),
        Command::Attack { common, model } => run::attack(&context(&common, "attack")?, model.into()),
        Command::Sweep(c) => run::sweep(&context(&c, "sweep")?),
        Command::Report(c) => run::report(&context(&c, "report")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.class());
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(match e.class() {
                "config" | "invalid_argument" => 2,
                "invariant" => 3,
                _ => 1,
            })
        }
    }
}
