use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advtext_cli::commands;
use advtext_cli::config::CliConfig;
use advtext_cli::error::CliError;

#[derive(Parser)]
#[command(
    name = "advtext",
    version,
    about = "Adversarial training for text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier (plain, freelb, carl or rar).
    Train(Common),
    /// Clean accuracy of a checkpoint.
    Eval(Common),
    /// Clean and robust accuracy under k-step gradient attacks.
    Attack(Common),
    /// Decode perturbed embeddings back to tokens with the reconstruction head.
    Reconstruct(Common),
    /// Train every point of a perturbation grid and rank by validation accuracy.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        /// Grid points trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mode=freelb`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<CliConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let s = commands::cmd_train(&c.resolve()?)?;
            match (s.best_val_acc, s.best_step) {
                (Some(acc), Some(step)) => println!("best val_acc {acc:.4} at step {step}"),
                _ => println!("trained without a validation split"),
            }
            println!("outputs in {}", s.out_dir.display());
        }
        Command::Eval(c) => {
            commands::cmd_eval(&c.resolve()?)?;
        }
        Command::Attack(c) => {
            commands::cmd_attack(&c.resolve()?)?;
        }
        Command::Reconstruct(c) => {
            commands::cmd_reconstruct(&c.resolve()?)?;
        }
        Command::Gridsearch { common, jobs } => {
            commands::cmd_gridsearch(&common.resolve()?, jobs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
