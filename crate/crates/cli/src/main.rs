mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tssl_core::data::DataError;
use tssl_core::eval::EvalError;
use tssl_core::trainer::TrainError;

/// Failure classes. Each prints as one `code: message` line on stderr.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Sequencing(String),
    #[error("{0}")]
    Train(String),
    #[error("{0}")]
    Eval(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Sequencing(_) => "sequencing",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Sequencing(_) => 6,
            CliError::Train(_) => 7,
            CliError::Eval(_) => 8,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<tssl_core::engine::EngineError> for CliError {
    fn from(e: tssl_core::engine::EngineError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Sequencing(_) | TrainError::IncompleteStore(_) => CliError::Sequencing(e.to_string()),
            TrainError::Plan(_) => CliError::Config(e.to_string()),
            TrainError::Data(e) => e.into(),
            TrainError::Io(e) => e.into(),
            e => CliError::Train(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tssl", version, about = "Three-stage self-training for semantic segmentation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `seeds.data` and `seeds.train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Switch off one component: cr, t2, sa, n2 or ema. Repeatable.
    #[arg(long, global = true, value_name = "NAME")]
    ablate: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as `train/` and `val/` directories.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage or the whole pipeline.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export argmax masks of a checkpoint for every training image.
    Pseudo {
        #[arg(long)]
        ckpt: PathBuf,
        /// Mask directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Generation tag recorded in the store manifest.
        #[arg(long, value_enum, default_value = "stage1")]
        generation: GenerationArg,
    },
    /// Draw SVG line charts from metrics CSV files.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenerationArg {
    Stage1,
    Stage2,
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TSSL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("TSSL_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn resolve(cli: &Cli) -> Result<config::RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => config::RunConfig::load(p)?,
        None => config::RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds.data = s;
        cfg.seeds.train = s;
    }
    for a in &cli.ablate {
        cfg.ablation.parse_flag(a).map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    if let Command::Plot { metrics, out } = &cli.command {
        return plot::cmd_plot(metrics, out);
    }
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            commands::cmd_synth(&cfg)
        }
        Command::Train { stage, out } => {
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            let stage = match stage {
                StageArg::One => Some(1),
                StageArg::Two => Some(2),
                StageArg::Three => Some(3),
                StageArg::All => None,
            };
            commands::cmd_train(&cfg, stage)
        }
        Command::Eval { ckpt, out } => {
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            commands::cmd_eval(&cfg, &ckpt)
        }
        Command::Pseudo { ckpt, out, generation } => {
            let generation = match generation {
                GenerationArg::Stage1 => tssl_core::trainer::Generation::Stage1,
                GenerationArg::Stage2 => tssl_core::trainer::Generation::Stage2,
            };
            commands::cmd_pseudo(&cfg, &ckpt, &out, generation)
        }
        Command::Plot { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
