//! `refcat`: corpus generation, training, ablations, sampling, evaluation
//! and gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 numeric failure (divergence, failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refcat::synthdata::{Context, Pose};
use refcat::train::AblationAxis;

#[derive(Parser, Debug)]
#[command(
    name = "refcat",
    version,
    about = "Reference-conditioned flow matching toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence: defaults < --config <
/// dedicated flags < --set.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with any subset of the effective config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds corpus generation, training, sampling and gradient checks.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-path override, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render candidate pairs, score them and write the filtered corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        /// Candidate pairs per subject.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train the base model and adapters on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Corpus to evaluate the final checkpoint on.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Train every variant along one axis and tabulate CHARIS scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        /// Held-out corpus for scoring; defaults to `--data`.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Generate a target image for one reference image.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_parser = parse_pose)]
        pose: Option<Pose>,
        #[arg(long, value_parser = parse_context)]
        context: Option<Context>,
    },
    /// Sample and score every pair of a corpus with a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse().map_err(|e: refcat::Error| e.to_string())
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    s.parse().map_err(|e: refcat::Error| e.to_string())
}

fn parse_context(s: &str) -> Result<Context, String> {
    s.parse().map_err(|e: refcat::Error| e.to_string())
}

fn exit_code(e: &refcat::Error) -> u8 {
    use refcat::Error::*;
    match e {
        Config(_) | Argument(_) => 1,
        _ if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData {
            common,
            subjects,
            pairs,
        } => commands::gen_data(&common, subjects, pairs),
        Command::Train {
            common,
            data,
            eval_data,
        } => commands::train(&common, &data, eval_data.as_deref()),
        Command::Ablate {
            common,
            data,
            axis,
            eval_data,
        } => commands::ablate(&common, &data, axis, eval_data.as_deref()),
        Command::Sample {
            common,
            checkpoint,
            reference,
            pose,
            context,
        } => commands::sample(&common, &checkpoint, &reference, pose, context),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, &data, &checkpoint),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
