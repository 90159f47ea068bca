//! Config-file overlay and resolved run settings.
//!
//! Precedence is command line, then config file, then built-in defaults.
//! Training keys sit at the top level of the file; the other subcommands read
//! `[prep]`, `[fuse]` and `[eval]` tables. Relative paths in a config file are
//! taken relative to the file's directory.
//!
//! Each resolved run serialises back to the same file layout, so an echoed
//! config can be fed to `--config` to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbfuse::data::{TILE_SIZE, TILE_STRIDE};
use dbfuse::training::{Preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{EvalArgs, Format, FuseArgs, PrepArgs, StrategyArg, TrainArgs};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub perceptual_weights: Option<PathBuf>,
    #[serde(default)]
    pub prep: PrepSection,
    #[serde(default)]
    pub fuse: FuseSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepSection {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub size: Option<usize>,
    pub stride: Option<usize>,
    pub mirror: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseSection {
    pub ir: Option<PathBuf>,
    pub vis: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub strategy: Option<StrategyArg>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fused: Option<PathBuf>,
    pub ir: Option<PathBuf>,
    pub vis: Option<PathBuf>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data_dir,
            &mut cfg.checkpoint_dir,
            &mut cfg.perceptual_weights,
            &mut cfg.prep.manifest,
            &mut cfg.prep.out_dir,
            &mut cfg.fuse.ir,
            &mut cfg.fuse.vis,
            &mut cfg.fuse.weights,
            &mut cfg.fuse.out,
            &mut cfg.eval.fused,
            &mut cfg.eval.ir,
            &mut cfg.eval.vis,
            &mut cfg.eval.out,
        ] {
            rebase(base, p);
        }
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

fn required<T>(value: Option<T>, name: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("missing `{name}`: pass it on the command line or in the config file"),
    }
}

/// A fully resolved run, echoed before the work starts.
pub trait Echo: Serialize {
    fn echo(&self) -> String {
        toml::to_string(self).expect("resolved config serialises")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepRun {
    pub seed: u64,
    pub prep: PrepResolved,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepResolved {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub size: usize,
    pub stride: usize,
    pub mirror: bool,
}

impl Echo for PrepRun {}

pub fn resolve_prep(args: &PrepArgs, file: FileConfig, seed: Option<u64>) -> Result<PrepRun> {
    let f = file.prep;
    Ok(PrepRun {
        seed: seed.or(file.seed).unwrap_or(0),
        prep: PrepResolved {
            manifest: required(args.manifest.clone().or(f.manifest), "manifest")?,
            out_dir: required(args.out_dir.clone().or(f.out_dir), "out")?,
            size: args.size.or(f.size).unwrap_or(TILE_SIZE),
            stride: args.stride.or(f.stride).unwrap_or(TILE_STRIDE),
            mirror: if args.no_mirror {
                false
            } else {
                f.mirror.unwrap_or(true)
            },
        },
    })
}

/// Training settings; serialises to the flat top-level layout.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Echo for TrainRun {}

pub fn resolve_train(args: &TrainArgs, file: FileConfig, seed: Option<u64>) -> Result<TrainRun> {
    let preset = args.preset.or(file.preset).unwrap_or(Preset::Desk);
    let base = TrainConfig::preset(preset);
    let config = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(base.epochs),
        batch: args.batch.or(file.batch).unwrap_or(base.batch),
        lr: args.lr.or(file.lr).unwrap_or(base.lr),
        alpha: file.alpha.unwrap_or(base.alpha),
        beta: file.beta.unwrap_or(base.beta),
        gamma: file.gamma.unwrap_or(base.gamma),
        seed: seed.or(file.seed).unwrap_or(base.seed),
        data_dir: args
            .data_dir
            .clone()
            .or(file.data_dir)
            .unwrap_or(base.data_dir),
        checkpoint_dir: args
            .checkpoint_dir
            .clone()
            .or(file.checkpoint_dir)
            .unwrap_or(base.checkpoint_dir),
        perceptual_weights: args.perceptual_weights.clone().or(file.perceptual_weights),
    };
    Ok(TrainRun { config })
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseRun {
    pub seed: u64,
    pub fuse: FuseResolved,
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseResolved {
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub weights: PathBuf,
    pub strategy: StrategyArg,
    pub out: PathBuf,
}

impl Echo for FuseRun {}

pub fn resolve_fuse(args: &FuseArgs, file: FileConfig, seed: Option<u64>) -> Result<FuseRun> {
    let f = file.fuse;
    Ok(FuseRun {
        seed: seed.or(file.seed).unwrap_or(0),
        fuse: FuseResolved {
            ir: required(args.ir.clone().or(f.ir), "ir")?,
            vis: required(args.vis.clone().or(f.vis), "vis")?,
            weights: required(args.weights.clone().or(f.weights), "weights")?,
            strategy: args.strategy.or(f.strategy).unwrap_or(StrategyArg::Channel),
            out: required(args.out.clone().or(f.out), "out")?,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub seed: u64,
    pub eval: EvalResolved,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResolved {
    pub fused: PathBuf,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub format: Format,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Echo for EvalRun {}

pub fn resolve_eval(args: &EvalArgs, file: FileConfig, seed: Option<u64>) -> Result<EvalRun> {
    let f = file.eval;
    Ok(EvalRun {
        seed: seed.or(file.seed).unwrap_or(0),
        eval: EvalResolved {
            fused: required(args.fused.clone().or(f.fused), "fused")?,
            ir: required(args.ir.clone().or(f.ir), "ir")?,
            vis: required(args.vis.clone().or(f.vis), "vis")?,
            format: args.format.or(f.format).unwrap_or(Format::Csv),
            out: args.out.clone().or(f.out),
        },
    })
}
