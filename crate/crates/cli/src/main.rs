//! `callrate`: synthetic data, ingestion, model fitting, evaluation and staffing
//! experiments from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use callrate::factor::Variant;
use callrate::ErrorKind;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "callrate", version, about = "Call-rate forecasting and staffing simulation")]
struct Cli {
    /// Worker threads (defaults to the rayon default). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate hourly counts with a known factor structure and optional CIIR.
    Synth(SynthArgs),
    /// Build the hourly count matrix from `event_id,timestamp` call records.
    Ingest(IngestArgs),
    /// Fit the latent factor model to a count series.
    FitFactor(FitFactorArgs),
    /// Fit a CIIR component on top of a fitted factor model.
    FitCiir(FitCiirArgs),
    /// Out-of-sample residual RMSE table for a list of models.
    Evaluate(EvaluateArgs),
    /// Staffing-cost simulation driven by the test counts and saved forecasts.
    Queue(QueueArgs),
    /// Summaries of a fitted model and/or a scree table over K.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CountsArgs {
    /// `date,hour,count` CSV.
    #[arg(long)]
    pub counts: PathBuf,
    /// Excluded dates, one `YYYY-MM-DD` per line.
    #[arg(long)]
    pub excluded: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// `event_id,timestamp` CSV.
    #[arg(long)]
    pub calls: PathBuf,
    #[arg(long)]
    pub start: NaiveDate,
    #[arg(long)]
    pub end: NaiveDate,
    /// Holiday dates to exclude, one per line.
    #[arg(long)]
    pub holidays: Option<PathBuf>,
    /// Also exclude days containing two consecutive zero-count hours.
    #[arg(long)]
    pub drop_gap_days: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitFactorArgs {
    #[command(flatten)]
    pub data: CountsArgs,
    #[arg(long)]
    pub config: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCiirArgs {
    #[command(flatten)]
    pub data: CountsArgs,
    /// Factor model JSON fitted on the same counts.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub train_excluded: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub test_excluded: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueueArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub test_excluded: Option<PathBuf>,
    /// `forecasts.csv` written by `evaluate`.
    #[arg(long)]
    pub forecasts: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: CountsArgs,
    /// Model JSON fitted on the counts.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fit K = 1..=N and report marginal deviance improvements.
    #[arg(long)]
    pub scree_k_max: Option<usize>,
    #[arg(long, default_value = "constrained_smoothed", value_parser = parse_variant)]
    pub scree_variant: Variant,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(raw: &str) -> Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| format!("unknown variant `{raw}` (plain, constrained, constrained_smoothed)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::FitFactor(a) => commands::fit_factor(&a),
        Command::FitCiir(a) => commands::fit_ciir(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Queue(a) => commands::queue(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
