mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Profile;

#[derive(Parser, Debug)]
#[command(
    name = "m2fcn",
    version,
    about = "Multi-stage boundary detection networks for EM images"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Configuration file (`key = value` lines with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Override a configuration key, e.g. `--set schedule.phase2_iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set schedule.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set network.stages=N`.
    #[arg(long, global = true)]
    stages: Option<usize>,
    /// Shorthand for `--set data.path=DIR`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Shorthand for `--set eval.threads=N`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory receiving every output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth,
    /// Pre-train stage 1, train the full network, write checkpoints and loss logs.
    Train,
    /// Write boundary probability maps for a dataset split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Threshold sweep against ground truth; writes scores and a PR curve.
    Eval {
        /// Checkpoint to predict with.
        #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
        model: Option<PathBuf>,
        /// Directory of probability maps named after dataset stems.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference checks of every op and the toy network.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Entries checked per network parameter tensor.
        #[arg(long, default_value_t = 60)]
        per_param: usize,
    },
    /// Train and score the design variants on the configured dataset.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

impl GlobalArgs {
    fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        let text = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?,
            ),
            None => None,
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("schedule.seed={s}"));
        }
        if let Some(s) = self.stages {
            overrides.push(format!("network.stages={s}"));
        }
        if let Some(d) = &self.data {
            overrides.push(format!("data.path={}", d.display()));
        }
        if let Some(t) = self.threads {
            overrides.push(format!("eval.threads={t}"));
        }
        let profile = self.profile.map(|p| match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Paper => Profile::Paper,
        });
        let env_seed = std::env::var("M2FCN_SEED").ok();
        Ok(config::resolve(
            profile,
            text.as_deref(),
            env_seed.as_deref(),
            &overrides,
        )?)
    }
}
