//! `dualtoken` command-line entry point.
//!
//! Results go to stdout, diagnostics to stderr. Check lines have the form
//! `PASS|FAIL <check> expected=<v> got=<v> tol=<v>`; any FAIL exits with 1.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dualtoken", version, about = "Dual-token vision transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameters and MACs, checked against published sizes.
    Count(CountArgs),
    /// Run one image through the model and print logit statistics.
    Forward(ForwardArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic dataset.
    Train(TrainArgs),
    /// Export Global Broadcast attention maps on the token grid.
    Attnmap(AttnmapArgs),
    /// Write a synthetic dataset cache.
    GenData(GenDataArgs),
    /// Print the resolved configuration as JSON.
    DumpConfig(ModelArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LocalArg {
    Conv,
    Window,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MlpArg {
    Normal,
    Mix,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DsArg {
    Stepwise,
    Onestep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokensArg {
    Normal,
    Posaware,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Pgm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Primitives,
    Blocks,
    Model,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adamw,
}

/// Model selection shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Named preset (dualtoken_t, dualtoken_t_mix, dualtoken_s, dualtoken_s_mix, toy, toy_224).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input side length.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub local: Option<LocalArg>,
    #[arg(long, value_enum)]
    pub mlp: Option<MlpArg>,
    #[arg(long, value_enum)]
    pub ds: Option<DsArg>,
    #[arg(long, value_enum)]
    pub tokens: Option<TokensArg>,
    /// Token grid side (3 to 8).
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..=8))]
    pub grid: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Collapse the breakdown to this many name components.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Skip the instrumented forward pass.
    #[arg(long)]
    pub no_forward: bool,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Container file holding `image` (S×S×3) or `images` (n×S×S×3).
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Model checkpoint to load instead of fresh initialisation.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "primitives")]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates sampled per parameter tensor for the model scope.
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "adamw")]
    pub optimizer: OptimizerArg,
    /// Dataset cache; generated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    pub samples: usize,
    /// Directory for `state.dtvt` and `model.dtvt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save the training state every this many steps (needs --out).
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Training state to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct AttnmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image-token index, `all` or `mean`.
    #[arg(long, default_value = "mean")]
    pub query: String,
    /// Block index in network order; last block when absent.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 8)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 800)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
