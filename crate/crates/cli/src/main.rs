//! `volrope`: synthesize data, train, evaluate, audit compositions, self-verify.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volrope::encoder::PaddingMode;
use volrope::objective::OptimizerKind;

#[derive(Debug, Parser)]
#[command(
    name = "volrope",
    version,
    about = "Variable-length volumetric vision-language pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (volumes, masks, findings, manifest).
    Synth(SynthArgs),
    /// Train the dual encoder on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval reports, heatmaps, RoPE sweep, probes.
    Eval(EvalArgs),
    /// Print the composed description of one window.
    Compose(ComposeArgs),
    /// Run the gradient, RoPE, metric and composer self-checks.
    Verify(VerifyArgs),
}

/// Options shared by commands that take a run configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.optim.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long, env = "VOLROPE_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of studies (`data.studies`).
    #[arg(long)]
    pub count: Option<usize>,
    /// Dataset seed (`data.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `train.steps`
    #[arg(long)]
    pub steps: Option<usize>,
    /// `train.batch_size`
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `train.optim.lr`
    #[arg(long)]
    pub lr: Option<f64>,
    /// `train.optim.kind`
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train with both optimizers from the same start and write both loss logs.
    #[arg(long)]
    pub compare_optimizers: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `eval.slice_counts`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub slices: Option<Vec<usize>>,
    /// `eval.base_multipliers`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub multipliers: Option<Vec<f64>>,
    /// `eval.padding`
    #[arg(long, value_parser = parse_padding)]
    pub padding: Option<PaddingMode>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Findings JSON of one study.
    #[arg(long)]
    pub findings: PathBuf,
    /// Mask file; the window's organs are read from it.
    #[arg(long, requires_all = ["start", "len"], conflicts_with = "organs")]
    pub mask: Option<PathBuf>,
    /// First slice of the window.
    #[arg(long, requires = "mask")]
    pub start: Option<usize>,
    /// Number of slices in the window.
    #[arg(long, requires = "mask")]
    pub len: Option<usize>,
    /// Organs in the window, comma separated, instead of a mask.
    #[arg(long, value_delimiter = ',', required_unless_present = "mask")]
    pub organs: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Reduced geometry and sample counts.
    #[arg(long)]
    pub quick: bool,
    /// Scale the backward rule of OP by 1.5 to show the gradient suite fails.
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown optimizer `{s}` (muon-hybrid, adamw-only)"))
}

fn parse_padding(s: &str) -> Result<PaddingMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown padding `{s}` (repeat, zero)"))
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some() || c.downcast_ref::<volrope::Error>().is_some_and(|e| e.is_io())
    });
    if io {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, dropping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compose(a) => commands::compose(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
