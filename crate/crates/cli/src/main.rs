use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use treeagg::commands::{eval_command, fit_command, select_command, simulate, Context};
use treeagg::config::{Method, Overrides, RTarget, RunConfig};
use treeagg::error::Result;

/// Latent spanning-tree aggregation for Gaussian graphical models with hidden nodes.
#[derive(Debug, Parser)]
#[command(name = "treeagg", version)]
struct Cli {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (outputs do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    /// Hidden count: simulated for `simulate`, fitted for `fit`, largest tried for `select`.
    #[arg(long, global = true)]
    r: Option<usize>,
    /// Prior edge probability for the extra `alpha_p0` posteriors of `fit`.
    #[arg(long, global = true)]
    p0: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate replicate datasets with their ground truth.
    Simulate,
    /// Fit one CSV, or every replicate of a simulated dataset directory.
    Fit { input: PathBuf },
    /// Choose the hidden count by BIC, ICL_T and ICL_TXH.
    Select { input: PathBuf },
    /// Score fits against the ground truth.
    Eval { dataset: PathBuf, fits: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let r_target = match cli.command {
        Command::Simulate => RTarget::Simulate,
        Command::Fit { .. } => RTarget::Fit,
        Command::Select { .. } => RTarget::Select,
        Command::Eval { .. } => RTarget::None,
    };
    let overrides = Overrides { seed: cli.seed, workers: cli.workers, method: cli.method, r: cli.r, p0: cli.p0 };
    config.apply(&overrides, r_target);
    config.validate()?;
    let ctx = Context { config, out: cli.out };
    match &cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Fit { input } => fit_command(&ctx, input),
        Command::Select { input } => select_command(&ctx, input),
        Command::Eval { dataset, fits } => eval_command(&ctx, dataset, fits),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("treeagg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
