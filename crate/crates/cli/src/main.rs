mod commands;
mod config;
mod error;
mod plot;

use clap::{Args, Parser, Subcommand};
use commands::Layout;
use config::RunConfig;
use error::CliError;
use sapi::model::ModelKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sapi", version, about = "Generate intersection scenarios, build datasets, train and evaluate trajectory predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for generation, splitting and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory holding every input and output of the pipeline.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override one config value, e.g. `--set train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, Layout), CliError> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides, self.seed)?;
        Ok((cfg, Layout { root: self.out.clone() }))
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated scenarios as JSON lines.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Extract samples from scenarios, split them and write the archive.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        /// Scenario file (defaults to `<out>/scenarios.jsonl`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one model kind and save its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sapi", value_parser = parse_kind)]
        model: ModelKind,
    },
    /// Evaluate checkpoints on the test split and print the comparison table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model kinds to evaluate (default: all four).
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        models: Vec<ModelKind>,
        /// Score a perfect predictor instead of checkpoints.
        #[arg(long)]
        oracle: bool,
    },
    /// Write predicted and ground-truth trajectories for one sample.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sapi", value_parser = parse_kind)]
        model: ModelKind,
        /// Sample id as `scenario/agent/t_index`.
        #[arg(long)]
        sample: String,
    },
    /// Render per-step error curves and prediction overlays as PNG files.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Evaluation report JSON files.
        #[arg(long, num_args = 0..)]
        reports: Vec<PathBuf>,
        /// Prediction dumps written by `predict`.
        #[arg(long, num_args = 0..)]
        predictions: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let (cfg, out) = common.load()?;
            commands::generate(&cfg, &out)
        }
        Command::BuildDataset { common, input } => {
            let (cfg, out) = common.load()?;
            commands::build_dataset(&cfg, &out, input.as_deref())
        }
        Command::Train { common, model } => {
            let (cfg, out) = common.load()?;
            commands::train_model(&cfg, &out, model)
        }
        Command::Evaluate { common, models, oracle } => {
            let (cfg, out) = common.load()?;
            let kinds = if models.is_empty() { ModelKind::ALL.to_vec() } else { models };
            commands::evaluate_models(&cfg, &out, &kinds, oracle)
        }
        Command::Predict { common, model, sample } => {
            let (cfg, out) = common.load()?;
            commands::predict(&cfg, &out, model, &sample).map(|_| ())
        }
        Command::Plot { common, reports, predictions } => {
            let (_, out) = common.load()?;
            commands::plot_all(&out, &reports, &predictions)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
