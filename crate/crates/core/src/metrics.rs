//! Fusion-quality indices: EI, SF, EN, SSIM, MI and Nabf.
//!
//! Inputs are `(1, 1, h, w)` tensors with values in `[0, 1]`. Every index
//! works on the 0-255 scale; EN and MI additionally quantize to 256 integer
//! levels.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Every constant the indices depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Maximum pixel value after scaling.
    pub peak: f64,
    /// Histogram levels for EN and MI.
    pub levels: usize,
    /// Added before flooring so values stored as `k / 255` in f32 land in bin `k`.
    pub quantize_eps: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent applied to edge strength to form the pixel weights.
    pub weight_exponent: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            peak: 255.0,
            levels: 256,
            quantize_eps: 1e-4,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
            weight_exponent: 1.0,
        }
    }
}

/// Row-major image on the 0-255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, peak: f64) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(
                "metrics",
                format!("expected a (1, 1, h, w) image, got {s}"),
            ));
        }
        Ok(Self {
            h: s.h,
            w: s.w,
            data: t.data().iter().map(|v| v.as_f64() * peak).collect(),
        })
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn planes<T: Scalar>(
    op: &'static str,
    images: &[&Tensor<T>],
    cfg: &MetricConfig,
) -> Result<Vec<Plane>> {
    let first = images[0].shape();
    for t in &images[1..] {
        if t.shape() != first {
            return Err(Error::ShapeMismatch {
                op,
                left: first,
                right: t.shape(),
            });
        }
    }
    images
        .iter()
        .map(|t| Plane::from_tensor(*t, cfg.peak))
        .collect()
}

fn require_min(op: &'static str, p: &Plane, min: usize) -> Result<()> {
    if p.h < min || p.w < min {
        return Err(Error::invalid(
            op,
            format!("needs at least {min}x{min} pixels, got {}x{}", p.h, p.w),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entropy and mutual information

fn quantize(p: &Plane, cfg: &MetricConfig) -> Vec<usize> {
    let top = cfg.levels - 1;
    p.data
        .iter()
        .map(|&v| ((v + cfg.quantize_eps).floor().max(0.0) as usize).min(top))
        .collect()
}

fn entropy_bits(counts: &[u64], total: u64) -> f64 {
    let total = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

fn plane_entropy(p: &Plane, cfg: &MetricConfig) -> f64 {
    let mut counts = vec![0u64; cfg.levels];
    for q in quantize(p, cfg) {
        counts[q] += 1;
    }
    entropy_bits(&counts, p.data.len() as u64)
}

fn plane_mi(a: &Plane, b: &Plane, cfg: &MetricConfig) -> f64 {
    let l = cfg.levels;
    let mut joint = vec![0u64; l * l];
    for (qa, qb) in quantize(a, cfg).into_iter().zip(quantize(b, cfg)) {
        joint[qa * l + qb] += 1;
    }
    let mut pa = vec![0u64; l];
    let mut pb = vec![0u64; l];
    for i in 0..l {
        for j in 0..l {
            let c = joint[i * l + j];
            pa[i] += c;
            pb[j] += c;
        }
    }
    let n = a.data.len() as f64;
    let mut mi = 0.0;
    for i in 0..l {
        for j in 0..l {
            let c = joint[i * l + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (pa[i] as f64 * pb[j] as f64)).ln();
            }
        }
    }
    (mi / std::f64::consts::LN_2).max(0.0)
}

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy<T: Scalar>(image: &Tensor<T>, cfg: &MetricConfig) -> Result<f64> {
    Ok(plane_entropy(&Plane::from_tensor(image, cfg.peak)?, cfg))
}

/// Mutual information in bits between two images.
pub fn mutual_information_pair<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cfg: &MetricConfig,
) -> Result<f64> {
    let p = planes("mutual_information", &[a, b], cfg)?;
    Ok(plane_mi(&p[0], &p[1], cfg))
}

/// `(MI(fused, ir) + MI(fused, vis), MI(fused, ir), MI(fused, vis))`.
pub fn mutual_information<T: Scalar>(
    fused: &Tensor<T>,
    ir: &Tensor<T>,
    vis: &Tensor<T>,
    cfg: &MetricConfig,
) -> Result<(f64, f64, f64)> {
    let p = planes("mutual_information", &[fused, ir, vis], cfg)?;
    let (a, b) = (plane_mi(&p[0], &p[1], cfg), plane_mi(&p[0], &p[2], cfg));
    Ok((a + b, a, b))
}

// ---------------------------------------------------------------------------
// Spatial frequency and edge intensity

fn plane_sf(p: &Plane) -> f64 {
    let mut row = 0.0;
    for y in 0..p.h {
        for x in 1..p.w {
            row += (p.at(y, x) - p.at(y, x - 1)).powi(2);
        }
    }
    let mut col = 0.0;
    for y in 1..p.h {
        for x in 0..p.w {
            col += (p.at(y, x) - p.at(y - 1, x)).powi(2);
        }
    }
    let rf2 = row / (p.h * (p.w - 1)) as f64;
    let cf2 = col / ((p.h - 1) * p.w) as f64;
    (rf2 + cf2).sqrt()
}

/// `sqrt(RF^2 + CF^2)`, each the RMS of neighbour differences along rows and
/// columns respectively.
pub fn spatial_frequency<T: Scalar>(image: &Tensor<T>, cfg: &MetricConfig) -> Result<f64> {
    let p = Plane::from_tensor(image, cfg.peak)?;
    require_min("spatial_frequency", &p, 2)?;
    Ok(plane_sf(&p))
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * n - 2 - i } else { i }) as usize
}

/// Horizontal and vertical Sobel responses.
pub fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut sx = vec![0.0; p.data.len()];
    let mut sy = vec![0.0; p.data.len()];
    for y in 0..p.h {
        let ym = reflect101(y as isize - 1, p.h);
        let yp = reflect101(y as isize + 1, p.h);
        for x in 0..p.w {
            let xm = reflect101(x as isize - 1, p.w);
            let xp = reflect101(x as isize + 1, p.w);
            let g = |yy: usize, xx: usize| p.at(yy, xx);
            sx[y * p.w + x] =
                (g(ym, xp) + 2.0 * g(y, xp) + g(yp, xp)) - (g(ym, xm) + 2.0 * g(y, xm) + g(yp, xm));
            sy[y * p.w + x] =
                (g(yp, xm) + 2.0 * g(yp, x) + g(yp, xp)) - (g(ym, xm) + 2.0 * g(ym, x) + g(ym, xp));
        }
    }
    (sx, sy)
}

/// Mean Sobel gradient magnitude.
pub fn edge_intensity<T: Scalar>(image: &Tensor<T>, cfg: &MetricConfig) -> Result<f64> {
    let p = Plane::from_tensor(image, cfg.peak)?;
    require_min("edge_intensity", &p, 3)?;
    let (sx, sy) = sobel(&p);
    Ok(sx.iter().zip(&sy).map(|(a, b)| a.hypot(*b)).sum::<f64>() / p.data.len() as f64)
}

// ---------------------------------------------------------------------------
// SSIM

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the same 1-D window along both axes.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn plane_ssim(a: &Plane, b: &Plane, cfg: &MetricConfig) -> f64 {
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let c1 = (cfg.ssim_k1 * cfg.peak).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.peak).powi(2);
    let f = |d: &[f64]| filter_valid(d, a.h, a.w, &k);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = f(&a.data);
    let mu_b = f(&b.data);
    let aa = f(&prod(&a.data, &a.data));
    let bb = f(&prod(&b.data, &b.data));
    let ab = f(&prod(&a.data, &b.data));
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean local SSIM over every position where the Gaussian window fits.
pub fn ssim_index<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MetricConfig) -> Result<f64> {
    let p = planes("ssim_index", &[a, b], cfg)?;
    require_min("ssim_index", &p[0], cfg.ssim_window)?;
    Ok(plane_ssim(&p[0], &p[1], cfg))
}

// ---------------------------------------------------------------------------
// Nabf

struct EdgeMap {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edge_map(p: &Plane) -> EdgeMap {
    let (sx, sy) = sobel(p);
    let strength = sx.iter().zip(&sy).map(|(a, b)| a.hypot(*b)).collect();
    let orientation = sx
        .iter()
        .zip(&sy)
        .map(|(&x, &y)| match (x == 0.0, y == 0.0) {
            (true, true) => 0.0,
            (true, false) => FRAC_PI_2,
            _ => (y / x).atan(),
        })
        .collect();
    EdgeMap {
        strength,
        orientation,
    }
}

/// Edge-preservation value of `fused` relative to a source at pixel `i`.
fn preservation(src: &EdgeMap, fused: &EdgeMap, i: usize, cfg: &MetricConfig) -> f64 {
    let (gs, gf) = (src.strength[i], fused.strength[i]);
    let g = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = 1.0 - (src.orientation[i] - fused.orientation[i]).abs() / FRAC_PI_2;
    let qg = cfg.gamma_g / (1.0 + (cfg.kappa_g * (g - cfg.sigma_g)).exp());
    let qa = cfg.gamma_a / (1.0 + (cfg.kappa_a * (a - cfg.sigma_a)).exp());
    qg * qa
}

/// Fusion-artifact ratio: edge-weighted loss of preservation at pixels where
/// the fused edge strength exceeds both sources, over the total source edge
/// weight. Zero when the sources carry no edges.
pub fn nabf<T: Scalar>(
    fused: &Tensor<T>,
    ir: &Tensor<T>,
    vis: &Tensor<T>,
    cfg: &MetricConfig,
) -> Result<f64> {
    let p = planes("nabf", &[fused, ir, vis], cfg)?;
    require_min("nabf", &p[0], 3)?;
    let (f, a, b) = (edge_map(&p[0]), edge_map(&p[1]), edge_map(&p[2]));
    let mut artifact = 0.0;
    let mut total = 0.0;
    for i in 0..p[0].data.len() {
        let wa = a.strength[i].powf(cfg.weight_exponent);
        let wb = b.strength[i].powf(cfg.weight_exponent);
        total += wa + wb;
        if f.strength[i] > a.strength[i] && f.strength[i] > b.strength[i] {
            artifact += (1.0 - preservation(&a, &f, i, cfg)) * wa
                + (1.0 - preservation(&b, &f, i, cfg)) * wb;
        }
    }
    Ok(if total > 0.0 { artifact / total } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Report

/// Field order is the CSV column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ei: f64,
    pub sf: f64,
    pub en: f64,
    pub ssim: f64,
    pub ssim_ir: f64,
    pub ssim_vi: f64,
    pub nabf: f64,
    pub mi: f64,
    pub mi_ir: f64,
    pub mi_vi: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 10] = [
        "ei", "sf", "en", "ssim", "ssim_ir", "ssim_vi", "nabf", "mi", "mi_ir", "mi_vi",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.ei,
            self.sf,
            self.en,
            self.ssim,
            self.ssim_ir,
            self.ssim_vi,
            self.nabf,
            self.mi,
            self.mi_ir,
            self.mi_vi,
        ]
    }

    fn from_values(v: [f64; 10]) -> Self {
        Self {
            ei: v[0],
            sf: v[1],
            en: v[2],
            ssim: v[3],
            ssim_ir: v[4],
            ssim_vi: v[5],
            nabf: v[6],
            mi: v[7],
            mi_ir: v[8],
            mi_vi: v[9],
        }
    }

    /// Column-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 10];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// All six indices for a fused image and its two sources. EI, SF and EN
/// describe the fused image alone; SSIM is the average over both sources.
pub fn evaluate_all<T: Scalar>(
    fused: &Tensor<T>,
    ir: &Tensor<T>,
    vis: &Tensor<T>,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let ssim_ir = ssim_index(fused, ir, cfg)?;
    let ssim_vi = ssim_index(fused, vis, cfg)?;
    let (mi, mi_ir, mi_vi) = mutual_information(fused, ir, vis, cfg)?;
    Ok(MetricReport {
        ei: edge_intensity(fused, cfg)?,
        sf: spatial_frequency(fused, cfg)?,
        en: entropy(fused, cfg)?,
        ssim: (ssim_ir + ssim_vi) / 2.0,
        ssim_ir,
        ssim_vi,
        nabf: nabf(fused, ir, vis, cfg)?,
        mi,
        mi_ir,
        mi_vi,
    })
}
