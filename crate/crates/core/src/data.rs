//! Grayscale loading, tile cropping, mirroring and seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const TILE_SIZE: usize = 128;
pub const TILE_STRIDE: usize = 14;
pub const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: &str = "file\tsource\trow\tcol\tflipped";

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::invalid(
                "role",
                format!("expected train or test, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

/// A `(1, 1, h, w)` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor<f32>,
    pub source_path: PathBuf,
    pub role: Role,
}

impl ImageRecord {
    pub fn new(pixels: Tensor<f32>, source_path: impl Into<PathBuf>, role: Role) -> Result<Self> {
        let s = pixels.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(
                "image record",
                format!("expected (1, 1, h, w), got {s}"),
            ));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "image record",
                format!("pixel value {v} outside [0, 1]"),
            ));
        }
        Ok(Self {
            pixels,
            source_path: source_path.into(),
            role,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }
}

fn luma_plane<P>(pixels: &[P], channels: usize, max: f64) -> Vec<f32>
where
    P: Copy + Into<f64>,
{
    pixels
        .chunks_exact(channels)
        .map(|px| {
            let v = if channels >= 3 {
                LUMA[0] * px[0].into() + LUMA[1] * px[1].into() + LUMA[2] * px[2].into()
            } else {
                px[0].into()
            };
            (v / max) as f32
        })
        .collect()
}

/// Decodes an 8- or 16-bit grayscale or RGB(A) image; RGB goes through the
/// 0.299/0.587/0.114 luma weights. Alpha is ignored.
pub fn load_grayscale(path: impl AsRef<Path>, role: Role) -> Result<ImageRecord> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match &img {
        DynamicImage::ImageLuma8(b) => luma_plane(b.as_raw(), 1, 255.0),
        DynamicImage::ImageLumaA8(b) => luma_plane(b.as_raw(), 2, 255.0),
        DynamicImage::ImageRgb8(b) => luma_plane(b.as_raw(), 3, 255.0),
        DynamicImage::ImageRgba8(b) => luma_plane(b.as_raw(), 4, 255.0),
        DynamicImage::ImageLuma16(b) => luma_plane(b.as_raw(), 1, 65535.0),
        DynamicImage::ImageLumaA16(b) => luma_plane(b.as_raw(), 2, 65535.0),
        DynamicImage::ImageRgb16(b) => luma_plane(b.as_raw(), 3, 65535.0),
        DynamicImage::ImageRgba16(b) => luma_plane(b.as_raw(), 4, 65535.0),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                kind: format!("{:?}", other.color()),
            })
        }
    };
    let pixels = Tensor::new(Shape::new(1, 1, h, w), data)?;
    ImageRecord::new(pixels, path, role)
}

/// Where a tile came from; `row`/`col` are pixel offsets of its top-left
/// corner in the source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub row: usize,
    pub col: usize,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub pixels: Tensor<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CropSet {
    pub tiles: Vec<Tile>,
}

impl CropSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn extend(&mut self, other: CropSet) {
        self.tiles.extend(other.tiles);
    }

    pub fn tensors(&self) -> Vec<Tensor<f32>> {
        self.tiles.iter().map(|t| t.pixels.clone()).collect()
    }
}

/// Number of offsets `0, stride, 2 * stride, ...` at which a window of
/// `size` fits in `extent`.
pub fn tile_positions(extent: usize, size: usize, stride: usize) -> usize {
    if extent < size || stride == 0 {
        0
    } else {
        (extent - size) / stride + 1
    }
}

pub fn crop_tiles(image: &ImageRecord, size: usize, stride: usize) -> Result<CropSet> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid(
            "crop_tiles",
            "size and stride must be positive",
        ));
    }
    let (h, w) = (image.height(), image.width());
    if h < size || w < size {
        return Err(Error::invalid(
            "crop_tiles",
            format!(
                "{}: {h}x{w} image is smaller than a {size}x{size} tile",
                image.source_path.display()
            ),
        ));
    }
    let src = image.pixels.data();
    let source = image.source_path.display().to_string();
    let mut tiles = Vec::new();
    for r in 0..tile_positions(h, size, stride) {
        for c in 0..tile_positions(w, size, stride) {
            let (row, col) = (r * stride, c * stride);
            let mut data = Vec::with_capacity(size * size);
            for y in row..row + size {
                data.extend_from_slice(&src[y * w + col..y * w + col + size]);
            }
            tiles.push(Tile {
                pixels: Tensor::new(Shape::new(1, 1, size, size), data)?,
                provenance: Provenance {
                    source: source.clone(),
                    row,
                    col,
                    flipped: false,
                },
            });
        }
    }
    Ok(CropSet { tiles })
}

pub fn mirror_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, h, w| t.get(n, c, h, s.w - 1 - w))
}

/// Appends a horizontally mirrored copy of every tile.
pub fn symmetric_expand(crops: CropSet) -> CropSet {
    let mirrored: Vec<Tile> = crops
        .tiles
        .iter()
        .map(|t| Tile {
            pixels: mirror_horizontal(&t.pixels),
            provenance: Provenance {
                flipped: !t.provenance.flipped,
                ..t.provenance.clone()
            },
        })
        .collect();
    let mut tiles = crops.tiles;
    tiles.extend(mirrored);
    CropSet { tiles }
}

fn shuffled_indices(len: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn batches_in_order(
    tiles: &[Tensor<f32>],
    order: &[usize],
    batch_size: usize,
) -> Result<Vec<Tensor<f32>>> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &tiles[i]).collect();
            Tensor::stack(&refs)
        })
        .collect()
}

fn check_batching(tiles: &[Tensor<f32>], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::invalid(
            "make_batches",
            "batch size must be at least 1",
        ));
    }
    if tiles.is_empty() {
        return Err(Error::invalid("make_batches", "no tiles to batch"));
    }
    Ok(())
}

/// Seeded shuffle into `(b, 1, h, w)` batches; the last batch may be short.
pub fn make_batches(
    tiles: &[Tensor<f32>],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    epoch_batches(tiles, batch_size, seed, 0)
}

/// Batches for one epoch. Each epoch draws from its own random stream, so the
/// order of epoch `e` does not depend on earlier epochs.
pub fn epoch_batches(
    tiles: &[Tensor<f32>],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Tensor<f32>>> {
    check_batching(tiles, batch_size)?;
    batches_in_order(
        tiles,
        &shuffled_indices(tiles.len(), seed, epoch),
        batch_size,
    )
}

// ---------------------------------------------------------------------------
// Manifests and tile directories

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    pub ir: PathBuf,
    pub vis: PathBuf,
}

/// Parses `role<TAB>ir_path<TAB>vis_path` lines. Blank lines and lines
/// starting with `#` are skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [role, ir, vis] = fields[..] else {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        };
        let role = role.parse().map_err(|_| Error::Manifest {
            line: i + 1,
            reason: format!("unknown role `{role}`"),
        })?;
        out.push(ManifestEntry {
            role,
            ir: base.join(ir),
            vis: base.join(vis),
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            reason: "manifest lists no image pairs".into(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepOptions {
    pub size: usize,
    pub stride: usize,
    pub mirror: bool,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            size: TILE_SIZE,
            stride: TILE_STRIDE,
            mirror: true,
        }
    }
}

/// Crops every training image (infrared and visible pooled) into tiles.
pub fn crop_manifest(entries: &[ManifestEntry], opts: PrepOptions) -> Result<CropSet> {
    let paths: Vec<&PathBuf> = entries
        .iter()
        .filter(|e| e.role == Role::Train)
        .flat_map(|e| [&e.ir, &e.vis])
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid("prep", "manifest has no train rows"));
    }
    let sets = paths
        .par_iter()
        .map(|p| {
            let crops = crop_tiles(&load_grayscale(p, Role::Train)?, opts.size, opts.stride)?;
            Ok(if opts.mirror {
                symmetric_expand(crops)
            } else {
                crops
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = CropSet::default();
    for s in sets {
        all.extend(s);
    }
    Ok(all)
}

/// Writes tiles as 16-bit PNGs named `000000.png, ...` plus `index.tsv`.
pub fn write_tiles(crops: &CropSet, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    crops
        .tiles
        .par_iter()
        .enumerate()
        .try_for_each(|(i, t)| write_png16(&out_dir.join(tile_name(i)), &t.pixels))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (i, t) in crops.tiles.iter().enumerate() {
        let p = &t.provenance;
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            tile_name(i),
            p.source,
            p.row,
            p.col,
            u8::from(p.flipped)
        ));
    }
    let path = out_dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

fn tile_name(i: usize) -> String {
    format!("{i:06}.png")
}

/// Loads the tiles listed in `dir/index.tsv`, in index order.
pub fn load_tile_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let files: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').next().unwrap_or_default())
        .collect();
    if files.is_empty() {
        return Err(Error::invalid(
            "load tiles",
            format!("{} lists no tiles", path.display()),
        ));
    }
    files
        .par_iter()
        .map(|f| load_grayscale(dir.join(f), Role::Train).map(|r| r.pixels))
        .collect()
}

// ---------------------------------------------------------------------------
// PNG output

fn save(buf: ImageBuffer<Luma<u16>, Vec<u16>>, path: &Path) -> Result<()> {
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn plane_dims(t: &Tensor<f32>) -> Result<(u32, u32)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid(
            "write png",
            format!("expected a (1, 1, h, w) image, got {s}"),
        ));
    }
    Ok((s.w as u32, s.h as u32))
}

/// 16-bit grayscale; 8-bit sources round-trip exactly.
pub fn write_png16(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (w, h) = plane_dims(t)?;
    let data = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    save(
        ImageBuffer::from_raw(w, h, data).expect("buffer size"),
        path,
    )
}

/// Clamps to `[0, 1]`, scales by 255 and rounds half to even.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn write_png8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (w, h) = plane_dims(t)?;
    let data = t.data().iter().map(|&v| quantize_u8(v)).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w, h, data).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Replicates border pixels so both extents become multiples of `multiple`.
pub fn pad_edge_to_multiple(t: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let s = t.shape();
    let up = |x: usize| x.div_ceil(multiple) * multiple;
    let padded = Shape::new(s.n, s.c, up(s.h), up(s.w));
    Tensor::from_fn(padded, |n, c, h, w| {
        t.get(n, c, h.min(s.h - 1), w.min(s.w - 1))
    })
}

/// Top-left `h x w` window.
pub fn crop_to(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| t.get(n, c, y, x))
}
