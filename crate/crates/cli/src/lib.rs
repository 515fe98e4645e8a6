//! The `xct` pipeline: composable commands over one experiment config, each
//! writing artifacts under `<output_root>/<run_id>/` plus a provenance
//! manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, RUN_ROOT_ENV};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "xct", version, about = "Crosscoder experiments over toy language-model checkpoints")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML), or a manifest JSON whose config snapshot is
    /// replayed. Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set crosscoder.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Name of the run directory under the output root.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Directory holding run directories; beats XCT_RUN_ROOT and the config.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    /// Crosscoder seeds, comma separated.
    #[arg(long, value_delimiter = ',', global = true)]
    pub seeds: Option<Vec<u64>>,
    /// Rerun even when the manifest says the outputs are current.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SourceArgs {
    /// Crosscoder sources (2 or 3 checkpoint ids), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<String>>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the vocabulary and the LM, extraction and evaluation corpora.
    GenCorpus,
    /// Generate the minimal-pair sets, one file per subtask.
    GenPairs,
    /// Train the toy LM and write every scheduled checkpoint.
    TrainLm,
    /// Capture mid-layer activations of the crosscoder sources.
    Extract,
    /// Train one crosscoder per seed.
    TrainXc(SourceArgs),
    /// Reconstruction quality of every seed's crosscoder and the seed mean.
    EvalXc(SourceArgs),
    /// Attribution tables per task slice for the first seed's crosscoder.
    Attribute(SourceArgs),
    /// IG-vs-exact agreement and the ablation study.
    Validate(SourceArgs),
    /// Accuracy, similarity, transitions, overlaps and annotation exports.
    Report(SourceArgs),
    /// Every command above, in order.
    Pipeline(SourceArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let session = commands::Session::open(&cli.global)?;
    commands::dispatch(&session, &cli.command)
}
