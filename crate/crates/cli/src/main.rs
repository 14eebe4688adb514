use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vlscene_core::losses::Stage;
use vlscene_core::runs::{self, AblationPreset, EvalSource, EvalTask, RunConfig, RunContext};

#[derive(Parser)]
#[command(name = "vlscene", version, about = "3D visual grounding and dense captioning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory written by `synth-gen`.
    #[arg(long, env = "VLSCENE_DATA_ROOT")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean scenes and the synthetic pair dataset.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train on synthetic pairs.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train grounding and captioning jointly on clean scenes.
    JointTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a single task.
    Finetune {
        task: TrainTask,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint directory to start from (required).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint or a prediction file.
    Eval {
        task: Task,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Run this checkpoint on the evaluation scenes.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score an existing prediction file instead.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run one training setup of the ablation study end to end.
    Ablation {
        /// One of a, b, c, d, e.
        #[arg(value_parser = parse_preset)]
        preset: AblationPreset,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Collate ablation run directories into a single table.
    Report {
        /// Directory for report.csv and its manifest.
        #[arg(long)]
        out: PathBuf,
        /// Output directories of `ablation` runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainTask {
    Grounding,
    Captioning,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Grounding,
    Captioning,
    Detection,
}

fn parse_preset(s: &str) -> Result<AblationPreset, String> {
    AblationPreset::parse(s).ok_or_else(|| format!("unknown preset `{s}`; expected one of a, b, c, d, e"))
}

fn context(common: &Common) -> Result<RunContext> {
    let config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(RunContext::new(config.with_seed(common.seed), common.config.clone(), &common.out))
}

fn require(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.to_path_buf()),
        None => bail!("{what} requires --checkpoint"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { common } => {
            let ctx = context(&common)?;
            runs::synth_gen(&ctx)?;
        }
        Command::Pretrain { common, data } => {
            runs::train(&context(&common)?, Stage::Pretrain, &data.data, None)?;
        }
        Command::JointTrain { common, data, checkpoint } => {
            runs::train(&context(&common)?, Stage::Joint, &data.data, checkpoint.as_deref())?;
        }
        Command::Finetune {
            task,
            common,
            data,
            checkpoint,
        } => {
            let ckpt = require(checkpoint.as_deref(), "finetune")?;
            let stage = match task {
                TrainTask::Grounding => Stage::FinetuneGrounding,
                TrainTask::Captioning => Stage::FinetuneCaptioning,
            };
            runs::train(&context(&common)?, stage, &data.data, Some(&ckpt))?;
        }
        Command::Eval {
            task,
            common,
            data,
            checkpoint,
            predictions,
        } => {
            let source = match (checkpoint, predictions) {
                (Some(c), None) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                _ => bail!("eval requires --checkpoint or --predictions"),
            };
            let task = match task {
                Task::Grounding => EvalTask::Grounding,
                Task::Captioning => EvalTask::Captioning,
                Task::Detection => EvalTask::Detection,
            };
            runs::eval(&context(&common)?, task, &data.data, &source)?;
        }
        Command::Ablation { preset, common, data } => {
            runs::ablation(&context(&common)?, preset, &data.data)?;
        }
        Command::Report { out, runs: dirs } => {
            let table = runs::report(&dirs, &out).context("building report")?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
