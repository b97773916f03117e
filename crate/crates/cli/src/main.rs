use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::CliError;

/// Detect and correct medical errors in clinical notes.
#[derive(Debug, Parser)]
#[command(name = "medcorr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides on dotted paths.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set strategy.prompt.shots=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset file and print its counts per source.
    Ingest {
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate reasons for the in-context example pool (resumable).
    ReasonBank {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides `run.reason_style`.
        #[arg(long)]
        style: Option<String>,
    },
    /// Correct every note of the configured split.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predictions against gold labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
        /// TSV with note_id, bertscore and bleurt columns.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sensitivity analyses.
    Sensitivity {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Bridge to the span predictor: export training records or import predictions.
    SpanExport {
        #[command(subcommand)]
        action: SpanAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Scores grouped by where the gold error sits, with Kruskal-Wallis and Dunn tests.
    Position {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
        #[arg(long, default_value = "rouge1")]
        metric: String,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// none or bonferroni
        #[arg(long, default_value = "none")]
        adjustment: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// One run per system-prompt role.
    Roles {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated roles; defaults to all seven.
        #[arg(long, value_delimiter = ',')]
        roles: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Two MCQ runs with the predicted span at different option positions.
    McqPosition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
        positions: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SpanAction {
    /// Write the error-containing notes as SQuAD v1 JSON.
    Squad {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check offline span predictions against a dataset and report EM/F1 where gold exists.
    Import {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { input, split, json } => commands::ingest(&input, &split, json),
        Command::ReasonBank { config, style } => commands::reason_bank(&config, style.as_deref()),
        Command::Predict { config } => commands::predict(&config),
        Command::Evaluate { predictions, gold, split, sidecar, out } => {
            commands::evaluate(&predictions, &gold, &split, sidecar.as_deref(), out.as_deref())
        }
        Command::Sensitivity { analysis } => commands::sensitivity(analysis),
        Command::SpanExport { action } => commands::span_export(action),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code as u8)
        }
    }
}
