use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::{RunArgs, RunConfig};

/// Mixed likelihood Gaussian process latent variable models.
#[derive(Parser, Debug)]
#[command(name = "mlgplvm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model (or continue the run in --checkpoint)
    Train(RunArgs),
    /// Latent-space metrics and plot data for a checkpoint
    Eval(RunArgs),
    /// Predict the entries of a holdout sidecar
    Impute(RunArgs),
    /// Sample a dataset from the generative model
    Synth(RunArgs),
    /// Write latent means, variances and ARD relevances
    ExportLatents(RunArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, args, f): (
        &str,
        &RunArgs,
        fn(&RunConfig) -> anyhow::Result<output::Outputs>,
    ) = match &cli.command {
        Command::Train(a) => ("train", a, commands::train),
        Command::Eval(a) => ("eval", a, commands::eval),
        Command::Impute(a) => ("impute", a, commands::impute),
        Command::Synth(a) => ("synth", a, commands::synth),
        Command::ExportLatents(a) => ("export-latents", a, commands::export),
    };
    let cfg = RunConfig::resolve(args)?;
    let dir = cfg.output_dir();
    let outputs = f(&cfg)?;
    for path in outputs.commit(&dir)? {
        log::info!("{name}: wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
