mod commands;
mod error;
mod metrics;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::Result;
use smdm::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "smdm", version, about = "Sparse keyframe motion diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set model.reduction_rate=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic motion dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a denoiser on the dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Series name used in the metrics file.
        #[arg(long, default_value = "train")]
        run_id: String,
    },
    /// Draw motions from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Class name; cycles through every class when absent.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Also write the keyframe set used at every step.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Score samples against the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        samples: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        run_id: String,
    },
    /// Keyframes of one motion from a motion file.
    Keyframes {
        #[command(flatten)]
        common: Common,
        /// Dataset or sample file.
        motion: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Fraction of frames to drop; defaults to the model's reduction rate.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Render metrics CSV files as SVG line charts.
    Plot {
        #[command(flatten)]
        common: Common,
        inputs: Vec<PathBuf>,
        /// Only plot this metric.
        #[arg(long)]
        metric: Option<String>,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &common.overrides {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Keyframes { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(cli.command.common())?;
    commands::dispatch(&config, cli.command)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
