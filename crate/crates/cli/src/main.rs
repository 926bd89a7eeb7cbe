mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "genneg", version, about = "Oracle-guided diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Train classifiers on the plain balanced loss (ablation).
    #[arg(long, global = true)]
    no_is: bool,
    /// Distill the guided stack after every iteration.
    #[arg(long, global = true)]
    distill: bool,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Evaluation sample count.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Reverse-sampler steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation point sets.
    GenData,
    /// Train the unguided score model.
    TrainBaseline,
    /// Iterate sample / label / classify / stack.
    GennegRun,
    /// Distill the latest guided stack into one network.
    Distill,
    /// Infraction and bounds for a checkpoint.
    Eval {
        /// Checkpoint to evaluate; defaults to the latest run state or the baseline.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluate a freshly initialized network instead.
        #[arg(long)]
        untrained: bool,
    },
    /// Check the guidance identities on a 1-D mixture.
    VerifyAnalytic,
    /// SVG scatters and metric charts for every run under --out.
    Plot,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBaseline => "train-baseline",
            Command::GennegRun => "genneg-run",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::VerifyAnalytic => "verify-analytic",
            Command::Plot => "plot",
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GENNEG_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("GENNEG_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("GENNEG_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<Value> {
    configure_threads()?;
    let c = &cli.common;
    let o = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        no_is: c.no_is,
        distill: c.distill,
        iterations: c.iterations,
        samples: c.samples,
        steps: c.steps,
    };
    let cfg = ExperimentConfig::load(c.config.as_deref(), &o)?;
    let _lock = commands::DirLock::acquire(&cfg.out)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainBaseline => commands::train_baseline_cmd(&cfg),
        Command::GennegRun => commands::genneg_run(&cfg),
        Command::Distill => commands::distill_cmd(&cfg),
        Command::Eval { model, untrained } => commands::eval_cmd(&cfg, model.as_deref(), *untrained),
        Command::VerifyAnalytic => commands::verify_cmd(&cfg, &o),
        Command::Plot => commands::plot_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match execute(&cli) {
        Ok(result) => {
            println!("{}", json!({ "command": name, "status": "ok", "result": result }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            println!("{}", json!({ "command": name, "status": "error", "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
