//! `bagsplit`: train instance scorers from bag labels or preferences.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 pseudo-labeling not applicable.

mod commands;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use bagsplit_core::{AggKind, Approx, LabelKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bagsplit",
    version,
    about = "Learn instance-level scorers from bag-level supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset with planted instance labels.
    Synth(SynthArgs),
    /// Load a dataset, check it and report bag/instance label consistency.
    Validate(ValidateArgs),
    /// Train a scorer from a TOML config; writes a checkpoint and a step log.
    Train(TrainArgs),
    /// Pseudo-label instances with a trained model, consistent with bag labels.
    Pslab(PslabArgs),
    /// Evaluate a model (or the cosine baseline) on a labeled dataset.
    Eval(EvalArgs),
    /// Run synth, train, pslab, retrain and eval for each seed of a manifest.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of training bags.
    #[arg(long)]
    pub bags: usize,
    /// Extra bags drawn from the same rule and written to `test.jsonl`.
    #[arg(long, default_value_t = 0)]
    pub test_bags: usize,
    #[arg(long, default_value_t = 2)]
    pub size_min: usize,
    #[arg(long, default_value_t = 8)]
    pub size_max: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value = "min")]
    pub agg: AggKind,
    /// `binary` or `integer:L`.
    #[arg(long, default_value = "binary")]
    pub labels: LabelKind,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub prior_quality: f64,
    /// Preference pairs to derive per split (0 = none).
    #[arg(long, default_value_t = 0)]
    pub pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Reject the file unless it declares this label kind.
    #[arg(long)]
    pub labels: Option<LabelKind>,
    /// Preference file whose bag ids must resolve against the dataset.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Exit 1 when any bag label disagrees with its instance labels.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preference pairs, required in preference mode.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PslabArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    /// Score each instance by its cosine prior against the bag context.
    Cosine,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Preference pairs; an empty file omits the preference report.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Approximation used to aggregate instance scores into bag predictions.
    #[arg(long, default_value = "hard")]
    pub approx: Approx,
    #[arg(long, default_value_t = 8.0)]
    pub sharpness: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Experiment manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the manifest output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_NOT_APPLICABLE: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<bagsplit_core::Error>() {
        Some(bagsplit_core::Error::NonFinite { .. }) => EXIT_NUMERICAL,
        Some(bagsplit_core::Error::NotApplicable(_)) => EXIT_NOT_APPLICABLE,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Pslab(a) => commands::pslab(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Pipeline(a) => pipeline::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
