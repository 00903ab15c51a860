mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidnir_core::FsoPlacement;

/// Encode a sequence of videos into one continually trained neural representation.
#[derive(Debug, Parser)]
#[command(name = "vidnir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every session of a manifest in order, checkpointing after each.
    Train(TrainArgs),
    /// Build the transfer matrix and forgetting statistics of a checkpoint.
    Eval(EvalArgs),
    /// Decode frames of one session to PNG files.
    Generate(GenerateArgs),
    /// Write a copy of a checkpoint with quantized parameters.
    Quantize(QuantizeArgs),
    /// Print size, capacity and transfer tables for a checkpoint.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "VIDNIR_MANIFEST")]
    pub manifest: PathBuf,
    /// Checkpoint to write; rewritten after every session.
    #[arg(long, env = "VIDNIR_OUT")]
    pub out: PathBuf,
    /// Continue from a checkpoint whose sessions are a prefix of the manifest.
    #[arg(long, env = "VIDNIR_RESUME")]
    pub resume: Option<PathBuf>,
    /// Stop once this many sessions are trained.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long, env = "VIDNIR_CAPACITY")]
    pub capacity: Option<f64>,
    /// Spectral branch placement `block:modes_h:modes_w[:noconv][:noimag]`,
    /// repeatable; `none` removes all branches.
    #[arg(long, env = "VIDNIR_FSO", value_delimiter = ',')]
    pub fso: Vec<FsoArg>,
    #[arg(long, env = "VIDNIR_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "VIDNIR_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "VIDNIR_LR")]
    pub lr: Option<f64>,
    /// Append per-step records as JSON lines.
    #[arg(long, env = "VIDNIR_METRICS_LOG")]
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub enum FsoArg {
    None,
    Placement(FsoPlacement),
}

impl std::str::FromStr for FsoArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(FsoArg::None);
        }
        s.parse().map(FsoArg::Placement).map_err(|e: vidnir_core::Error| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "VIDNIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Reload sessions from this manifest instead of the recorded sources.
    #[arg(long, env = "VIDNIR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Write the reports as JSON.
    #[arg(long, env = "VIDNIR_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "VIDNIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Session number, starting at 1.
    #[arg(long)]
    pub session: usize,
    /// Frame range `first-last` (1-based, inclusive); defaults to all frames.
    #[arg(long)]
    pub frames: Option<String>,
    /// Output directory for `f%05d.png` files.
    #[arg(long, env = "VIDNIR_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long, env = "VIDNIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "VIDNIR_BITS")]
    pub bits: u32,
    #[arg(long, env = "VIDNIR_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, env = "VIDNIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Bit width for the size table; defaults to the checkpoint's own.
    #[arg(long, env = "VIDNIR_BITS")]
    pub bits: Option<u32>,
    /// Write the report as JSON.
    #[arg(long, env = "VIDNIR_OUT")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            commands::CliError::new("usage", first).print();
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.print();
            ExitCode::FAILURE
        }
    }
}
