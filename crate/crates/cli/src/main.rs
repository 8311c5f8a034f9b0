use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmbnn_cli::commands::{self, FitStatus};
use mmbnn_cli::{Experiment, Overrides, Profile, Result};

#[derive(Parser)]
#[command(
    name = "mmbnn",
    version,
    about = "Multi-modal Bayesian neural network surrogate experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed; overrides `seed` in the experiment file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Defaults for sizes the experiment file leaves out.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,

    /// Output directory; overrides `output` in the experiment file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and write its cache.
    Generate,
    /// Fit every model and replicate.
    Fit,
    /// Score fitted replicates on the evaluation set.
    Evaluate,
    /// Compare models and compute the canonical-correlation table.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| mmbnn_cli::CliError::Usage("--config <path> is required".into()))?;
    let overrides = Overrides {
        seed: cli.seed,
        profile: cli.profile,
        out: cli.out,
    };
    let exp = Experiment::load(&path, &overrides)?;
    match cli.command {
        Command::Generate => {
            let d = commands::generate(&exp)?;
            println!(
                "{}: {} training modalities, {} evaluation points",
                d.name,
                d.modalities.len(),
                d.eval.x.rows()
            );
            for m in &d.modalities {
                let pca = m
                    .pca
                    .as_ref()
                    .map(|p| format!(", {} principal components", p.retained))
                    .unwrap_or_default();
                println!("  {:<24} n = {:<5} k = {}{pca}", m.name, m.x.rows(), m.y.cols());
            }
        }
        Command::Fit => {
            for o in commands::fit(&exp)? {
                match o.status {
                    FitStatus::Ok => println!(
                        "{:<9} replicate {:>2} (seed {}): {} epochs, loss {:.4}{}",
                        o.model.name(),
                        o.replicate,
                        o.seed,
                        o.epochs,
                        o.final_loss.unwrap_or(f64::NAN),
                        if o.converged { "" } else { ", epoch limit reached" }
                    ),
                    FitStatus::Failed => println!("FAILED {}", o.error.unwrap_or_default()),
                }
            }
        }
        Command::Evaluate => {
            for o in commands::evaluate(&exp)? {
                match o.skipped {
                    None => println!(
                        "{:<9} replicate {:>2}: {} records",
                        o.model.name(),
                        o.replicate,
                        o.records
                    ),
                    Some(why) => println!("{:<9} replicate {:>2}: skipped ({why})", o.model.name(), o.replicate),
                }
            }
        }
        Command::Report => {
            let r = commands::report(&exp)?;
            print!("{}", commands::render(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
