//! Reconstruction objective: pixel, Laplacian-gradient, colour-histogram and
//! perceptual terms combined as
//! `pixel + alpha * gradient + beta * color + gamma * perceptual`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbfw;
use crate::error::{Error, Result};
use crate::model::{conv_entries, conv_from_entries, ConvParams};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Histogram bins for the colour term.
pub const COLOR_BINS: usize = 255;
/// Ranges narrower than this collapse both histograms to zero.
pub const DEGENERATE_RANGE: f64 = 1e-8;
/// Number of feature maps the perceptual term compares.
pub const PERCEPTUAL_TAPS: usize = 4;
/// Seed of the built-in random feature extractor.
pub const DEFAULT_FEATURE_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.001,
            gamma: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "loss weights",
                    format!("{name} must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn combine(&self, pixel: f64, gradient: f64, color: f64, perceptual: f64) -> f64 {
        pixel + self.alpha * gradient + self.beta * color + self.gamma * perceptual
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub gradient: f64,
    pub color: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.pixel,
            self.gradient,
            self.color,
            self.perceptual,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

pub fn pixel_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, input: Var) -> Result<Var> {
    g.mse(recon, input)
}

/// MSE between the Laplacian responses of the two images.
pub fn gradient_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, input: Var) -> Result<Var> {
    let s = g.shape(recon);
    if s.h < 3 || s.w < 3 {
        return Err(Error::invalid(
            "gradient_loss",
            format!("image must be at least 3x3, got {s}"),
        ));
    }
    if s != g.shape(input) {
        return Err(Error::ShapeMismatch {
            op: "gradient_loss",
            left: s,
            right: g.shape(input),
        });
    }
    let lr = g.laplacian(recon);
    let li = g.laplacian(input);
    g.mse(lr, li)
}

/// Soft histogram of every sample over a shared `[lo, hi]` range; shape
/// `(n, 1, 1, bins)`.
pub fn soft_histogram<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    bins: usize,
    lo: T,
    hi: T,
) -> Result<Var> {
    if !(hi > lo) {
        return Err(Error::invalid(
            "soft_histogram",
            format!("need hi > lo, got [{lo}, {hi}]"),
        ));
    }
    let n = g.shape(image).n;
    g.soft_histogram(image, bins, vec![Some((lo, hi)); n])
}

/// `(1/255) * ||hist(recon) - hist(input)||_2`, averaged over the batch.
///
/// Each sample's histogram range is the joint min/max of the two images and
/// is treated as a constant.
pub fn color_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, input: Var) -> Result<Var> {
    let s = g.shape(recon);
    if s != g.shape(input) {
        return Err(Error::ShapeMismatch {
            op: "color_loss",
            left: s,
            right: g.shape(input),
        });
    }
    let ranges: Vec<_> = (0..s.n)
        .map(|n| {
            let (lo, hi) = g
                .value(recon)
                .sample(n)
                .iter()
                .chain(g.value(input).sample(n))
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            ((hi - lo).as_f64() >= DEGENERATE_RANGE).then_some((lo, hi))
        })
        .collect();
    let h_re = g.soft_histogram(recon, COLOR_BINS, ranges.clone())?;
    let h_in = g.soft_histogram(input, COLOR_BINS, ranges)?;
    let diff = g.sub(h_re, h_in)?;
    let norms = g.sample_norm(diff);
    let mean = g.mean(norms);
    Ok(g.scale(mean, T::from_f64_lossy(1.0 / 255.0)))
}

/// A frozen network exposing intermediate feature maps.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>>;
}

/// Sum over the extractor's taps of the feature-map MSE. Only `recon`
/// receives gradients when `input` is a constant.
pub fn perceptual_loss<T: Scalar, E: FeatureExtractor<T> + ?Sized>(
    g: &mut Graph<T>,
    recon: Var,
    input: Var,
    extractor: &E,
) -> Result<Var> {
    let fr = extractor.features(g, recon)?;
    let fi = extractor.features(g, input)?;
    if fr.len() != PERCEPTUAL_TAPS || fi.len() != PERCEPTUAL_TAPS {
        return Err(Error::invalid(
            "perceptual_loss",
            format!(
                "extractor must expose {PERCEPTUAL_TAPS} taps, got {}",
                fr.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(fi) {
        let term = g.mse(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("four taps"))
}

/// Builds the weighted objective and reports each term.
pub fn total_loss<T: Scalar, E: FeatureExtractor<T> + ?Sized>(
    g: &mut Graph<T>,
    recon: Var,
    input: Var,
    weights: &LossWeights,
    extractor: &E,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let pixel = pixel_loss(g, recon, input)?;
    let gradient = gradient_loss(g, recon, input)?;
    let color = color_loss(g, recon, input)?;
    let perceptual = perceptual_loss(g, recon, input, extractor)?;

    let mut total = pixel;
    for (term, w) in [
        (gradient, weights.alpha),
        (color, weights.beta),
        (perceptual, weights.gamma),
    ] {
        let scaled = g.scale(term, T::from_f64_lossy(w));
        total = g.add(total, scaled)?;
    }

    let (p, gr, c, pe) = (
        scalar(g, pixel),
        scalar(g, gradient),
        scalar(g, color),
        scalar(g, perceptual),
    );
    let report = LossReport {
        pixel: p,
        gradient: gr,
        color: c,
        perceptual: pe,
        total: weights.combine(p, gr, c, pe),
    };
    Ok((total, report))
}

/// Stack of stride-2 3x3 convolutions with Mish; each stage's activated
/// output is one tap. Grayscale input is replicated to the first stage's
/// channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatureExtractor<T: Scalar = f32> {
    stages: Vec<ConvParams<T>>,
}

impl<T: Scalar> ConvFeatureExtractor<T> {
    pub const STAGE_CHANNELS: [usize; PERCEPTUAL_TAPS] = [16, 32, 64, 128];
    pub const INPUT_CHANNELS: usize = 3;

    pub fn new(stages: Vec<ConvParams<T>>) -> Result<Self> {
        if stages.len() != PERCEPTUAL_TAPS {
            return Err(Error::invalid(
                "feature extractor",
                format!("expected {PERCEPTUAL_TAPS} stages, got {}", stages.len()),
            ));
        }
        for pair in stages.windows(2) {
            if pair[0].c_out() != pair[1].c_in() {
                return Err(Error::invalid(
                    "feature extractor",
                    format!(
                        "stage outputs {} channels but next expects {}",
                        pair[0].c_out(),
                        pair[1].c_in()
                    ),
                ));
            }
        }
        Ok(Self { stages })
    }

    /// Deterministic random stand-in for a pretrained network.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = Self::INPUT_CHANNELS;
        let stages = Self::STAGE_CHANNELS
            .iter()
            .map(|&c_out| {
                let p = ConvParams::kaiming(c_in, c_out, 2, &mut rng);
                c_in = c_out;
                p
            })
            .collect();
        Self { stages }
    }

    pub fn stages(&self) -> &[ConvParams<T>] {
        &self.stages
    }

    pub fn cast<U: Scalar>(&self) -> ConvFeatureExtractor<U> {
        ConvFeatureExtractor {
            stages: self.stages.iter().map(ConvParams::cast).collect(),
        }
    }
}

impl ConvFeatureExtractor<f32> {
    pub fn stage_name(k: usize) -> String {
        format!("feat.stage{k}.conv")
    }

    /// Loads `feat.stage{1..4}.conv.{weight,bias}` from a DBFW file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = dbfw::read_file(path)?;
        let mut stages = Vec::with_capacity(PERCEPTUAL_TAPS);
        for k in 1..=PERCEPTUAL_TAPS {
            let name = Self::stage_name(k);
            let kernel = dbfw::find(&entries, &format!("{name}.weight"))?;
            let [c_out, c_in, 3, 3] = kernel.dims[..] else {
                return Err(Error::Malformed(format!(
                    "{name}.weight must be (c_out, c_in, 3, 3), got {:?}",
                    kernel.dims
                )));
            };
            stages.push(conv_from_entries(&entries, &name, c_in, c_out, 2)?);
        }
        Self::new(stages)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<_> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, p)| conv_entries(&Self::stage_name(i + 1), p))
            .collect();
        dbfw::write_file(path, &entries)
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvFeatureExtractor<T> {
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image);
        let c_in = self.stages[0].c_in();
        let mut x = if s.c == c_in {
            image
        } else if s.c == 1 {
            g.concat_channels(&vec![image; c_in])?
        } else {
            return Err(Error::invalid(
                "feature extractor",
                format!("input has {} channels, extractor expects 1 or {c_in}", s.c),
            ));
        };
        let mut taps = Vec::with_capacity(self.stages.len());
        for p in &self.stages {
            let k = g.constant(p.kernel.clone());
            let b = g.constant(p.bias_tensor());
            let y = g.conv2d(x, k, b, p.stride)?;
            x = g.mish(y);
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Extractor wrapper that drops taps; used to exercise the tap-count check.
#[cfg(test)]
struct Truncated<E>(E, usize);

#[cfg(test)]
impl<T: Scalar, E: FeatureExtractor<T>> FeatureExtractor<T> for Truncated<E> {
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let mut f = self.0.features(g, image)?;
        f.truncate(self.1);
        Ok(f)
    }
}

/// Convenience for callers holding plain tensors.
pub fn evaluate<E: FeatureExtractor<f32> + ?Sized>(
    recon: &Tensor<f32>,
    input: &Tensor<f32>,
    weights: &LossWeights,
    extractor: &E,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let i = g.constant(input.clone());
    Ok(total_loss(&mut g, r, i, weights, extractor)?.1)
}
