mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<mvssm_core::Error> for CliError {
    fn from(e: mvssm_core::Error) -> Self {
        match e {
            mvssm_core::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "mvssm", version, about = "Multi-view 3D pose estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration layered over the built-in reference scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Camera count; `eval` accepts a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    pub cameras: Vec<usize>,
    /// Worker threads for scene-level parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dotted override, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes to disk.
    Generate(Common),
    /// Train a model and write its checkpoint and metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory written by `generate`; defaults to the validation split.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Train and compare every block variant.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Generate(c) | Command::Ablate(c) => c,
        Command::Train { common, .. } | Command::Eval { common, .. } => common,
    };
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Generate(c) => commands::generate(&c),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Eval { common, model, scenes } => commands::eval(&common, &model, scenes.as_deref()),
        Command::Ablate(c) => commands::ablate(&c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mvssm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
