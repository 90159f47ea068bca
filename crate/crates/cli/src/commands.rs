use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbfuse::data::{self, PrepOptions, Role};
use dbfuse::losses::{ConvFeatureExtractor, DEFAULT_FEATURE_SEED};
use dbfuse::metrics::{evaluate_all, MetricConfig, MetricReport};
use dbfuse::model::{fuse_images, ModelWeights, SPATIAL_MULTIPLE};
use dbfuse::training::{self, Checkpoint, TrainOptions};
use serde::Serialize;

use crate::args::Format;
use crate::config::{EvalRun, FuseRun, PrepRun, TrainRun};

pub fn prep(run: &PrepRun) -> Result<()> {
    let p = &run.prep;
    let entries = data::read_manifest(&p.manifest)?;
    let opts = PrepOptions {
        size: p.size,
        stride: p.stride,
        mirror: p.mirror,
    };
    let crops = data::crop_manifest(&entries, opts)?;
    data::write_tiles(&crops, &p.out_dir)?;
    let pairs = entries.iter().filter(|e| e.role == Role::Train).count();
    println!(
        "wrote {} tiles from {pairs} training pairs to {}",
        crops.len(),
        p.out_dir.display()
    );
    Ok(())
}

pub fn train(run: &TrainRun, resume: Option<usize>) -> Result<()> {
    let cfg = &run.config;
    if !cfg.data_dir.is_dir() {
        bail!("data directory {} does not exist", cfg.data_dir.display());
    }
    let tiles = data::load_tile_dir(&cfg.data_dir)?;
    let extractor = match &cfg.perceptual_weights {
        Some(path) => ConvFeatureExtractor::load(path)?,
        None => ConvFeatureExtractor::seeded(DEFAULT_FEATURE_SEED),
    };
    let resume = resume
        .map(|epoch| Checkpoint::load(&cfg.checkpoint_dir, epoch))
        .transpose()
        .context("loading resume checkpoint")?;
    fs::create_dir_all(&cfg.checkpoint_dir)
        .with_context(|| format!("creating {}", cfg.checkpoint_dir.display()))?;
    let config_copy = cfg.checkpoint_dir.join("config.toml");
    fs::write(&config_copy, crate::config::Echo::echo(run))
        .with_context(|| format!("writing {}", config_copy.display()))?;

    println!(
        "training on {} tiles, {} epochs, batch {}",
        tiles.len(),
        cfg.epochs,
        cfg.batch
    );
    let options = TrainOptions {
        checkpoint_dir: Some(cfg.checkpoint_dir.clone()),
        resume,
        ..TrainOptions::default()
    };
    let epochs = cfg.epochs;
    training::train(&tiles, cfg, &extractor, options, &mut |r| {
        let l = &r.report;
        println!(
            "epoch {}/{epochs} pixel={:.6} gradient={:.6} color={:.6} perceptual={:.6} total={:.6} lr={:e}",
            r.epoch, l.pixel, l.gradient, l.color, l.perceptual, l.total, r.lr
        );
    })?;
    println!(
        "final weights: {}",
        cfg.checkpoint_dir.join(training::FINAL_FILE).display()
    );
    Ok(())
}

pub fn fuse(run: &FuseRun) -> Result<()> {
    let f = &run.fuse;
    let ir = data::load_grayscale(&f.ir, Role::Test)?;
    let vis = data::load_grayscale(&f.vis, Role::Test)?;
    let (h, w) = (ir.height(), ir.width());
    if (vis.height(), vis.width()) != (h, w) {
        bail!(
            "size mismatch: infrared is {h}x{w}, visible is {}x{}",
            vis.height(),
            vis.width()
        );
    }
    let weights = ModelWeights::load(&f.weights)
        .with_context(|| format!("loading weights {}", f.weights.display()))?;
    let ir_p = data::pad_edge_to_multiple(&ir.pixels, SPATIAL_MULTIPLE);
    let vis_p = data::pad_edge_to_multiple(&vis.pixels, SPATIAL_MULTIPLE);
    let fused = fuse_images(&ir_p, &vis_p, &weights, f.strategy.into())?;
    let fused = data::crop_to(&fused, h, w);
    data::write_png8(&f.out, &fused)?;
    println!("wrote {h}x{w} fused image to {}", f.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Row<'a> {
    image: &'a str,
    #[serde(flatten)]
    report: MetricReport,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    files.retain(|p| {
        p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "bmp"))
    });
    files.sort();
    Ok(files)
}

fn score(fused: &Path, ir: &Path, vis: &Path, cfg: &MetricConfig) -> Result<MetricReport> {
    let load = |p: &Path| data::load_grayscale(p, Role::Test).map(|r| r.pixels);
    let (f, a, b) = (load(fused)?, load(ir)?, load(vis)?);
    evaluate_all(&f, &a, &b, cfg).with_context(|| format!("scoring {}", fused.display()))
}

pub fn eval(run: &EvalRun) -> Result<()> {
    let e = &run.eval;
    let cfg = MetricConfig::default();
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if e.fused.is_dir() {
        let files = image_files(&e.fused)?;
        if files.is_empty() {
            bail!("no images in {}", e.fused.display());
        }
        for f in files {
            let name = f.file_name().expect("file has a name");
            let report = score(&f, &e.ir.join(name), &e.vis.join(name), &cfg)?;
            rows.push((name.to_string_lossy().into_owned(), report));
        }
        let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
        rows.push((
            "mean".into(),
            MetricReport::mean(&reports).expect("non-empty"),
        ));
    } else {
        let report = score(&e.fused, &e.ir, &e.vis, &cfg)?;
        rows.push((e.fused.display().to_string(), report));
    }

    let mut out: Box<dyn Write> = match &e.out {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    };
    let rows: Vec<Row> = rows
        .iter()
        .map(|(image, report)| Row {
            image,
            report: *report,
        })
        .collect();
    match e.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(std::iter::once("image").chain(MetricReport::COLUMNS))?;
            for r in &rows {
                let values = r.report.values().map(|v| v.to_string());
                w.write_record(std::iter::once(r.image.to_string()).chain(values))?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}
