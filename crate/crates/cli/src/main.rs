//! `dfq`: data-free quantization from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfq_core::{DfqError, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "dfq", version, about = "Data-free post-training quantization toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for reports and other generated files.
    #[arg(long, global = true, default_value = "reports")]
    pub report_dir: PathBuf,
    /// TOML file of dotted-key settings, e.g. `aac.lr = 0.1`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// One setting as `key=value`; applied after --config. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural pattern dataset.
    MakeDataset(commands::MakeDataset),
    /// Train a full-precision model.
    TrainFp(commands::TrainFp),
    /// Quantize a trained model with the data-free pipeline.
    Quantize(commands::Quantize),
    /// Top-1 accuracy of a full-precision or quantized model.
    Evaluate(commands::Evaluate),
    /// Accuracy of each pipeline stage over several seeds.
    Ablation(commands::Ablation),
    /// Compare synthesis losses for clip-only calibration.
    LossStudy(commands::LossStudy),
    /// CE versus ABS on the identity model.
    Toy(commands::Toy),
    /// Brute-force per-site clipping sweep against labeled data.
    Sweep(commands::Sweep),
}

/// Bad flags or settings, as opposed to failures of the work itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<DfqError>() {
            return match e.class() {
                ErrorClass::Io => 2,
                ErrorClass::Contract => 3,
                ErrorClass::Numerical => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.common.quiet, cli.common.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let c = &cli.common;
    let result = match &cli.command {
        Command::MakeDataset(a) => a.run(c),
        Command::TrainFp(a) => a.run(c),
        Command::Quantize(a) => a.run(c),
        Command::Evaluate(a) => a.run(c),
        Command::Ablation(a) => a.run(c),
        Command::LossStudy(a) => a.run(c),
        Command::Toy(a) => a.run(c),
        Command::Sweep(a) => a.run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
