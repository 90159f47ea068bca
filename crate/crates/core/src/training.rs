//! Adam, reduce-on-plateau scheduling and the training loop.
//!
//! Training is a pure function of the tiles, the configuration and the seed:
//! the shuffle for epoch `e` is drawn from its own stream, so a run resumed
//! from the checkpoint of epoch `k` continues exactly like the uninterrupted
//! one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data;
use crate::dbfw::{self, Entry};
use crate::error::{Error, Result};
use crate::losses::{total_loss, FeatureExtractor, LossReport, LossWeights};
use crate::model::{reconstruct_graph, BoundWeights, ModelWeights};
use crate::tensor::{Graph, Tensor};

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter buffer, the number of steps
/// taken and the learning rate applied by the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_weights(weights: &ModelWeights<f32>, lr: f64) -> Self {
        let sizes: Vec<usize> = weights.buffers().iter().map(|b| b.len()).collect();
        Self::new(&sizes, lr)
    }

    /// Moments as `adam.m.<i>` / `adam.v.<i>` entries. Step and learning rate
    /// travel in the checkpoint sidecar.
    pub fn to_entries(&self) -> Vec<Entry> {
        let moments = |kind: &str, bufs: &[Vec<f32>]| -> Vec<Entry> {
            bufs.iter()
                .enumerate()
                .map(|(i, b)| Entry::new(format!("adam.{kind}.{i}"), vec![b.len()], b.clone()))
                .collect()
        };
        let mut out = moments("m", &self.m);
        out.extend(moments("v", &self.v));
        out
    }

    pub fn from_entries(entries: &[Entry], sizes: &[usize], step: u64, lr: f64) -> Result<Self> {
        let load = |kind: &str| -> Result<Vec<Vec<f32>>> {
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let e = dbfw::find(entries, &format!("adam.{kind}.{i}"))?;
                    if e.data.len() != n {
                        return Err(Error::Malformed(format!(
                            "{}: expected {n} values, got {}",
                            e.name,
                            e.data.len()
                        )));
                    }
                    Ok(e.data.clone())
                })
                .collect()
        };
        Ok(Self {
            step,
            lr,
            m: load("m")?,
            v: load("v")?,
        })
    }
}

/// One bias-corrected Adam update of every buffer in place.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameter buffers, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::invalid(
                "adam_step",
                format!("buffer {i}: {} parameters, {} gradients", p.len(), g.len()),
            ));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter buffer {i} at index {j}"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = state.lr * (mj / c1) / ((vj / c2).sqrt() + hyper.eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plateau scheduler

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: u32,
    pub factor: f64,
    pub min_lr: f64,
    /// Absolute improvement required to reset the patience counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.5,
            min_lr: 1e-10,
            threshold: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// `None` until the first epoch has been seen.
    pub best_loss: Option<f64>,
    pub epochs_since_improvement: u32,
    pub current_lr: f64,
}

impl SchedulerState {
    pub fn new(lr: f64) -> Self {
        Self {
            best_loss: None,
            epochs_since_improvement: 0,
            current_lr: lr,
        }
    }
}

pub fn scheduler_step(
    state: SchedulerState,
    epoch_loss: f64,
    cfg: &PlateauConfig,
) -> SchedulerState {
    let mut next = state;
    let improved = match state.best_loss {
        None => true,
        Some(best) => epoch_loss < best - cfg.threshold,
    };
    if improved {
        next.best_loss = Some(epoch_loss);
        next.epochs_since_improvement = 0;
        return next;
    }
    next.epochs_since_improvement += 1;
    if next.epochs_since_improvement >= cfg.patience {
        next.current_lr = (state.current_lr * cfg.factor).max(cfg.min_lr);
        next.epochs_since_improvement = 0;
    }
    next
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 100 epochs, batch 64.
    Paper,
    /// 5 epochs, batch 8, for CPU runs.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}` (expected paper or desk)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual_weights: Option<PathBuf>,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (epochs, batch) = match preset {
            Preset::Paper => (100, 64),
            Preset::Desk => (5, 8),
        };
        let w = LossWeights::default();
        Self {
            epochs,
            batch,
            lr: 1e-3,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            seed: 0,
            data_dir: PathBuf::from("tiles"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            perceptual_weights: None,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("train config", "batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "train config",
                format!("lr must be positive, got {}", self.lr),
            ));
        }
        self.loss_weights().validate()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Per-epoch log row; `lr` is the rate in effect during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,pixel,gradient,color,perceptual,total,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, r.pixel, r.gradient, r.color, r.perceptual, r.total, self.lr
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    epoch: usize,
    step: u64,
    lr: f64,
    scheduler: SchedulerState,
    best_total: Option<f64>,
    log: Vec<EpochRecord>,
}

/// Everything needed to continue a run after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub weights: ModelWeights<f32>,
    pub optimizer: OptimizerState,
    pub scheduler: SchedulerState,
    pub best_total: Option<f64>,
    pub log: Vec<EpochRecord>,
}

pub fn weights_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.dbfw"))
}

fn optimizer_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.optim.dbfw"))
}

fn sidecar_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.json"))
}

pub const BEST_FILE: &str = "best.dbfw";
pub const FINAL_FILE: &str = "final.dbfw";
pub const LOG_FILE: &str = "train_log.csv";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.weights.save(weights_path(dir, self.epoch))?;
        dbfw::write_file(
            optimizer_path(dir, self.epoch),
            &self.optimizer.to_entries(),
        )?;
        let sidecar = Sidecar {
            epoch: self.epoch,
            step: self.optimizer.step,
            lr: self.optimizer.lr,
            scheduler: self.scheduler,
            best_total: self.best_total,
            log: self.log.clone(),
        };
        let path = sidecar_path(dir, self.epoch);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, epoch: usize) -> Result<Self> {
        let path = sidecar_path(dir, epoch);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        let weights = ModelWeights::load(weights_path(dir, epoch))?;
        let sizes: Vec<usize> = weights.buffers().iter().map(|b| b.len()).collect();
        let entries = dbfw::read_file(optimizer_path(dir, epoch))?;
        let optimizer = OptimizerState::from_entries(&entries, &sizes, sidecar.step, sidecar.lr)?;
        Ok(Self {
            epoch: sidecar.epoch,
            weights,
            optimizer,
            scheduler: sidecar.scheduler,
            best_total: sidecar.best_total,
            log: sidecar.log,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub log: Vec<EpochRecord>,
}

/// Where and whether to write per-epoch files.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub adam: AdamHyper,
    pub plateau: PlateauConfig,
}

/// One optimisation step on `batch`; returns the loss terms before the update.
pub fn train_step<E: FeatureExtractor<f32> + ?Sized>(
    weights: &mut ModelWeights<f32>,
    optimizer: &mut OptimizerState,
    batch: &Tensor<f32>,
    loss_weights: &LossWeights,
    extractor: &E,
    hyper: &AdamHyper,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let params = BoundWeights::bind(&mut g, weights, true);
    let x = g.constant(batch.clone());
    let recon = reconstruct_graph(&mut g, &params, x)?;
    let (loss, report) = total_loss(&mut g, recon, x, loss_weights, extractor)?;
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss {report:?}")));
    }
    g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = params
        .vars()
        .into_iter()
        .map(|v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let grad_slices: Vec<&[f32]> = grads.iter().map(Tensor::data).collect();
    adam_step(&mut weights.buffers_mut(), &grad_slices, optimizer, hyper)?;
    Ok(report)
}

fn weighted_mean(parts: &[(LossReport, usize)]) -> LossReport {
    let total: usize = parts.iter().map(|(_, n)| n).sum();
    let mut out = LossReport::default();
    for (r, n) in parts {
        let w = *n as f64 / total as f64;
        out.pixel += w * r.pixel;
        out.gradient += w * r.gradient;
        out.color += w * r.color;
        out.perceptual += w * r.perceptual;
        out.total += w * r.total;
    }
    out
}

fn write_log(dir: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in log {
        writeln!(text, "{}", r.csv_row()).expect("write to string");
    }
    let path = dir.join(LOG_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Trains on `tiles` (each `(1, 1, h, w)`) for `config.epochs` epochs.
///
/// With a checkpoint directory, every completed epoch writes weights,
/// optimiser moments, a JSON sidecar and the CSV log, and the best epoch so
/// far (by mean total loss) is copied to `best.dbfw`. A non-finite loss or
/// gradient aborts the run and leaves the last checkpoint in place.
pub fn train<E: FeatureExtractor<f32> + ?Sized>(
    tiles: &[Tensor<f32>],
    config: &TrainConfig,
    extractor: &E,
    options: TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if tiles.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let loss_weights = config.loss_weights();
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut ck = match options.resume {
        Some(ck) => ck,
        None => {
            let weights = ModelWeights::init(config.seed);
            Checkpoint {
                epoch: 0,
                optimizer: OptimizerState::for_weights(&weights, config.lr),
                weights,
                scheduler: SchedulerState::new(config.lr),
                best_total: None,
                log: Vec::new(),
            }
        }
    };

    for epoch in ck.epoch + 1..=config.epochs {
        let lr = ck.scheduler.current_lr;
        ck.optimizer.lr = lr;
        let batches = data::epoch_batches(tiles, config.batch, config.seed, epoch as u64)?;
        let mut parts = Vec::with_capacity(batches.len());
        for batch in &batches {
            let report = train_step(
                &mut ck.weights,
                &mut ck.optimizer,
                batch,
                &loss_weights,
                extractor,
                &options.adam,
            )?;
            parts.push((report, batch.shape().n));
        }
        let record = EpochRecord {
            epoch,
            report: weighted_mean(&parts),
            lr,
        };
        ck.scheduler = scheduler_step(ck.scheduler, record.report.total, &options.plateau);
        ck.epoch = epoch;
        ck.log.push(record);
        let improved = ck.best_total.is_none_or(|b| record.report.total < b);
        if improved {
            ck.best_total = Some(record.report.total);
        }
        if let Some(dir) = &options.checkpoint_dir {
            ck.save(dir)?;
            if improved {
                ck.weights.save(dir.join(BEST_FILE))?;
            }
            write_log(dir, &ck.log)?;
        }
        on_epoch(&record);
    }

    if let Some(dir) = &options.checkpoint_dir {
        ck.weights.save(dir.join(FINAL_FILE))?;
        write_log(dir, &ck.log)?;
    }
    Ok(TrainOutcome {
        weights: ck.weights,
        log: ck.log,
    })
}
