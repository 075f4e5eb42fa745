mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

/// Measure how compression error in a small decoder model grows with context length.
#[derive(Debug, Parser)]
#[command(name = "lclab", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (gen-model, compress) or directory (sweep, simulate, report).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "LCLAB_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded toy checkpoint.
    GenModel(GenModelArgs),
    /// Prune or quantize a checkpoint.
    Compress(CompressArgs),
    /// KL divergence against the base model over a range of context lengths.
    Sweep,
    /// Monte Carlo simulation of attention noise accumulation.
    Simulate,
    /// Fit per-method slopes from sweep and simulation CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Checkpoint to compress.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sweep or simulation CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::Usage(first_line(&e.to_string()).to_string())),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim_start_matches("error: ")
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.code())
}
