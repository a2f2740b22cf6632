mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "mmcap", version, about = "Multimodal video segment captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Small, fast settings for a laptop run.
    #[arg(long, global = true)]
    desk: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Split timed transcripts into segments and pair them with frames.
    Segment {
        /// Timed transcript file (overrides `data.asr`).
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the subword vocabulary.
    TrainBpe {
        /// Text or segment files (override `data.bpe_inputs`).
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Caption every segment of `data.segments`.
    Predict {
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against references.
    Eval {
        /// Prediction file (overrides `data.predictions`).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Reference captions or annotator timelines (overrides `data.references`).
        #[arg(long)]
        references: Option<PathBuf>,
        /// `standard`, `constant:<tag>` or `agreement` (overrides `eval.mode`).
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.desk {
        cfg.apply_desk();
    }
    if let (Some(seed), Some(train)) = (common.seed, cfg.train.as_mut()) {
        train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Segment { input, common } => {
            let mut cfg = load(&common)?;
            if let Some(p) = input {
                cfg.data.asr = Some(p);
            }
            commands::segment(cfg, &common.out)
        }
        Command::TrainBpe { inputs, common } => {
            let mut cfg = load(&common)?;
            if !inputs.is_empty() {
                cfg.data.bpe_inputs = inputs;
            }
            commands::train_bpe(cfg, &common.out)
        }
        Command::Pretrain { common } => commands::train(load(&common)?, &common.out, true),
        Command::Finetune { common } => commands::train(load(&common)?, &common.out, false),
        Command::Predict { common } => commands::predict(load(&common)?, &common.out),
        Command::Eval {
            predictions,
            references,
            mode,
            common,
        } => {
            let mut cfg = load(&common)?;
            if predictions.is_some() {
                cfg.data.predictions = predictions;
            }
            if references.is_some() {
                cfg.data.references = references;
            }
            if let Some(m) = mode {
                cfg.eval.mode = m;
            }
            commands::eval(cfg, &common.out)
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<mmcap_core::Error>(), Some(mmcap_core::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
