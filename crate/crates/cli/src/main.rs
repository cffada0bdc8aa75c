//! `zmask` — calibrate, train, attack, defend and score the over-activation defense.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod report;

use commands::{AttackArgs, Context, ModeArg};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "zmask", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer activation statistics over clean inputs.
    Calibrate(Common),
    /// Fit the fusion blocks on patched scenes and pick the detection threshold.
    Train(Common),
    /// Craft one patch, or a sweep over the mixing weight.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// β for `beta`, α for the defense-aware modes.
        #[arg(long, conflicts_with = "sweep")]
        value: Option<f64>,
        #[arg(long)]
        sweep: bool,
    },
    /// Flag and mask an image, a directory of images, or a trace set.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// mIoU outside patches, mask IoU and detection rates.
    Metrics(Common),
    /// Export toy scenes, with patched copies when `--patch` is given.
    Scenes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patch: Option<PathBuf>,
    },
}

fn context(c: Common) -> Result<Context, CliError> {
    Context::new(RunConfig::load(&c.config)?, c.out, c.seed)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Calibrate(c) => commands::calibrate(&context(c)?),
        Command::Train(c) => commands::train(&context(c)?),
        Command::Attack { common, mode, value, sweep } => {
            commands::attack(&context(common)?, &AttackArgs { mode, value, sweep })
        }
        Command::Defend { common, input } => commands::defend(&context(common)?, input.as_deref()),
        Command::Metrics(c) => commands::metrics(&context(c)?),
        Command::Scenes { common, patch } => commands::export_scenes(&context(common)?, patch.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
