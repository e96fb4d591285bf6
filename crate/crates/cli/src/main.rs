use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddnz_cli::{CliError, ExperimentConfig, Method, Overrides, Pipeline};

/// Phantom-scale denoising experiments: dataset generation, training,
/// denoising, evaluation, reporting.
#[derive(Parser)]
#[command(name = "ddnz", version, about)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "ddnz.toml")]
    config: PathBuf,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Generate,
    /// Train (or tune) methods; defaults to every configured method.
    Train {
        #[arg(long)]
        method: Option<String>,
    },
    /// Apply trained methods to the test split.
    Denoise {
        #[arg(long)]
        method: Option<String>,
    },
    /// Compute metrics over the test split.
    Evaluate,
    /// Render report tables and plots.
    Report,
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Method::parse(s).ok_or_else(|| {
        CliError::Config(format!(
            "unknown method `{s}` (expected one of {})",
            Method::ALL.map(|m| m.label()).join(", ")
        ))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, out_dir: cli.out };
    let cfg = ExperimentConfig::load(&cli.config, &overrides)?;
    let pipeline = Pipeline::new(cfg, cli.force);
    match cli.command {
        Command::Generate => {
            pipeline.generate()?;
        }
        Command::Train { method } => match method {
            Some(m) => {
                pipeline.train(parse_method(&m)?)?;
            }
            None => {
                for m in pipeline.config().methods.clone() {
                    pipeline.train(m)?;
                }
            }
        },
        Command::Denoise { method } => match method {
            Some(m) => {
                pipeline.denoise(parse_method(&m)?)?;
            }
            None => {
                for m in pipeline.config().methods.clone() {
                    pipeline.denoise(m)?;
                }
            }
        },
        Command::Evaluate => {
            pipeline.evaluate()?;
        }
        Command::Report => {
            pipeline.report()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
