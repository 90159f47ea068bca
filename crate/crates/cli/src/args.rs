use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dbfuse::fusion::FusionStrategy;
use dbfuse::training::Preset;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "dbfuse",
    version,
    about = "Infrared/visible image fusion with a dual-branch autoencoder"
)]
pub struct Cli {
    /// Seed for weight initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file whose keys fill in options not given on the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Crop the training images listed in a manifest into tiles.
    Prep(PrepArgs),
    /// Train the autoencoder on prepared tiles.
    Train(TrainArgs),
    /// Fuse one infrared/visible pair.
    Fuse(FuseArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Lines of `role<TAB>ir_path<TAB>vis_path`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for tiles and index.tsv.
    #[arg(long = "out")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Skip the mirrored copies.
    #[arg(long)]
    pub no_mirror: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (same as the global --config).
    pub config_path: Option<PathBuf>,
    /// Starting point for keys absent from the config.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// DBFW file with the perceptual feature extractor.
    #[arg(long)]
    pub perceptual_weights: Option<PathBuf>,
    /// Continue from the checkpoint written after this epoch.
    #[arg(long)]
    pub resume: Option<usize>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: dbfuse::Error| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Addition,
    Channel,
}

impl From<StrategyArg> for FusionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Addition => FusionStrategy::Addition,
            StrategyArg::Channel => FusionStrategy::Channel,
        }
    }
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ir: Option<PathBuf>,
    #[arg(long)]
    pub vis: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Output PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Fused image, or a directory of fused images.
    #[arg(long)]
    pub fused: Option<PathBuf>,
    /// Infrared source, or a directory with files of the same names.
    #[arg(long)]
    pub ir: Option<PathBuf>,
    /// Visible source, or a directory with files of the same names.
    #[arg(long)]
    pub vis: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
