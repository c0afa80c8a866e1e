//! `ripeloc` command-line tool: dataset synthesis, training, evaluation,
//! pruning, inference, cost tables and augmentation previews.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind as ClapKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod draw;
pub mod error;

pub use error::{CliError, CliResult, ErrorKind};

use commands::{AugpreviewOpts, EvalOpts, FlopsOpts, InferOpts, PruneOpts, SynthOpts, TrainOpts};

#[derive(Parser, Debug)]
#[command(name = "ripeloc", version, about = "Compact ripeness-aware tomato detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML or JSON file of option values; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the resolved options as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: SynthOpts,
    },
    /// Train a detector; writes weights and a per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a model or a detection file against a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: EvalOpts,
    },
    /// Remove low-scale BatchNorm channels, optionally fine-tuning after.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: PruneOpts,
    },
    /// Detect fruit in images; writes detection text and overlays.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: InferOpts,
    },
    /// Print parameter and FLOP counts per network part.
    Flops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: FlopsOpts,
    },
    /// Write augmented training samples with their labels drawn on.
    Augpreview {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: AugpreviewOpts,
    },
}

fn prepare<T: Serialize + DeserializeOwned>(common: &Common, flags: &T) -> CliResult<Option<T>> {
    let opts = config::resolve(common.config.as_deref(), flags)?;
    if common.print_config {
        let text = serde_json::to_string_pretty(&opts).map_err(|e| CliError::usage(e.to_string()))?;
        println!("{text}");
        return Ok(None);
    }
    Ok(Some(opts))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.render().to_string().trim_end())),
    };
    macro_rules! dispatch {
        ($common:expr, $opts:expr, $f:path) => {
            match prepare($common, $opts)? {
                Some(o) => $f(o),
                None => Ok(()),
            }
        };
    }
    match &cli.command {
        Command::Synth { common, opts } => dispatch!(common, opts, commands::synth),
        Command::Train { common, opts } => dispatch!(common, opts, commands::train),
        Command::Eval { common, opts } => dispatch!(common, opts, commands::eval),
        Command::Prune { common, opts } => dispatch!(common, opts, commands::prune),
        Command::Infer { common, opts } => dispatch!(common, opts, commands::infer),
        Command::Flops { common, opts } => dispatch!(common, opts, commands::flops),
        Command::Augpreview { common, opts } => dispatch!(common, opts, commands::augpreview),
    }
}
