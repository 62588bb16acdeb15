//! `aqa`: synthetic data generation, training, transfer experiments and
//! gradient checking for the LSTM score regressor.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use aqa_core::data::ActionClass;
use aqa_core::protocols::Baseline;

use commands::{FromArg, GradCheckArgs};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "aqa", version, about = "Action-quality score regression with cross-action transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest CSV; overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, features, truth).
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on one or more actions and report per-action test correlation.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated action names, or `all`.
        #[arg(long)]
        actions: Option<String>,
    },
    /// Train on every configured action but one and test on the held-out one.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_action)]
        holdout: ActionClass,
        /// Evaluate an untrained model instead.
        #[arg(long)]
        baseline: Option<BaselineArg>,
        /// Comma-separated action pool the held-out class is removed from.
        #[arg(long)]
        actions: Option<String>,
    },
    /// Fine-tune on a few samples of a novel action.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_action)]
        novel: ActionClass,
        #[arg(long)]
        train_size: usize,
        /// Checkpoint path, or `random`.
        #[arg(long = "from")]
        from: FromArg,
    },
    /// Compare backpropagated gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        step_size: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0.1)]
        init_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write grad_check.csv and config.resolved here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Random,
}

fn parse_action(s: &str) -> Result<ActionClass, String> {
    s.parse().map_err(|e: aqa_core::Error| e.to_string())
}

/// `None` for `all`.
fn parse_actions(s: &str) -> Result<Option<Vec<ActionClass>>> {
    if s.trim() == "all" {
        return Ok(None);
    }
    let list = s
        .split(',')
        .map(|a| a.trim().parse::<ActionClass>())
        .collect::<Result<Vec<_>, _>>()?;
    if list.is_empty() {
        anyhow::bail!("--actions needs at least one action");
    }
    Ok(Some(list))
}

fn resolve(common: Common, data: Option<DataArgs>) -> Result<RunConfig> {
    RunConfig::resolve(
        common.config.as_deref(),
        Overrides {
            seed: common.seed,
            out: common.out,
            manifest: data.and_then(|d| d.manifest),
        },
    )
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynth { common } => {
            commands::gen_synth(&resolve(common, None)?)?;
        }
        Command::Train { common, data, actions } => {
            let cfg = resolve(common, Some(data))?;
            let (list, all) = match actions.as_deref().map(parse_actions).transpose()? {
                Some(None) => (None, true),
                Some(Some(list)) => (Some(list), false),
                None => (None, false),
            };
            commands::train(cfg, list, all, &command_line())?;
        }
        Command::ZeroShot {
            common,
            data,
            holdout,
            baseline,
            actions,
        } => {
            let cfg = resolve(common, Some(data))?;
            let list = actions.as_deref().map(parse_actions).transpose()?.flatten();
            let baseline = match baseline {
                Some(BaselineArg::Random) => Baseline::RandomInit,
                None => Baseline::Trained,
            };
            commands::zero_shot(cfg, holdout, baseline, list, &command_line())?;
        }
        Command::Finetune {
            common,
            data,
            novel,
            train_size,
            from,
        } => {
            let cfg = resolve(common, Some(data))?;
            commands::finetune(cfg, novel, train_size, from, &command_line())?;
        }
        Command::GradCheck {
            hidden,
            dim,
            steps,
            trials,
            step_size,
            tolerance,
            init_std,
            seed,
            out,
            inject_fault,
        } => {
            let args = GradCheckArgs {
                hidden,
                dim,
                steps,
                trials,
                step_size,
                tolerance,
                init_std,
                inject_fault,
            };
            return commands::grad_check_cmd(&args, seed, out.as_deref());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
