//! Image ingestion, square resizing, augmentation, the 80/20 split and batching.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SPATIAL_FACTOR;
use crate::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 256;
pub const MAX_ROTATION_DEGREES: f64 = 15.0;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A decoded RGB image, 8 bits per channel, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn from_rgb8(path: impl Into<PathBuf>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        let path = path.into();
        if pixels.len() != width * height * 3 {
            return Err(Error::Image {
                path,
                message: format!("{} bytes do not form a {width}×{height} RGB image", pixels.len()),
            });
        }
        Ok(ImageRecord {
            path,
            width,
            height,
            pixels,
        })
    }

    /// Decodes a PNG or JPEG; grayscale is expanded and alpha dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(path, w as usize, h as usize, rgb.into_raw())
    }

    /// `3×H×W` tensor in `[0, 1]` (pixel / 255).
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("sizes agree")
    }
}

/// Converts a `3×H×W` tensor in `[0, 1]` back to 8-bit RGB (rounding, clamped).
pub fn tensor_to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        other => return Err(Error::dim(format!("expected a 3×H×W image, found {other:?}"))),
    };
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, found {c}")));
    }
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + p].clamp(0.0, 1.0);
            out[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    Ok((w, h, out))
}

/// Writes a `3×H×W` (or `1×3×H×W`) tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (w, h, pixels) = tensor_to_rgb8(image)?;
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Internal("pixel buffer does not match its extents".into()))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedImages {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<SkippedFile>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn load_paths(paths: Vec<PathBuf>, source: &Path) -> Result<LoadedImages> {
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG or JPEG images found in {}", source.display())));
    }
    let mut loaded = LoadedImages::default();
    for path in paths {
        match ImageRecord::open(&path) {
            Ok(r) => loaded.records.push(r),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                loaded.skipped.push(SkippedFile {
                    path,
                    reason: e.to_string(),
                });
            }
        }
    }
    if loaded.records.is_empty() {
        return Err(Error::Config(format!(
            "none of the {} images under {} could be decoded",
            loaded.skipped.len(),
            source.display()
        )));
    }
    Ok(loaded)
}

/// Every PNG/JPEG below `dir`, in lexicographic path order. Files that fail
/// to decode are listed in `skipped` rather than aborting the load.
pub fn load_directory(dir: &Path) -> Result<LoadedImages> {
    load_paths(image_files(dir)?, dir)
}

/// PNG/JPEG paths below `dir`, sorted.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| Error::Config(format!("cannot scan {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && has_image_extension(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads the images listed one per line in a UTF-8 manifest. Relative paths
/// resolve against the manifest's directory; blank lines and `#` comments
/// are ignored. Listed order is kept.
pub fn load_manifest(manifest: &Path) -> Result<LoadedImages> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let paths = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    load_paths(paths, manifest)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResizeMode {
    /// Scale the shorter side to the target, then center-crop the longer one.
    #[default]
    Crop,
    /// Scale each axis independently, ignoring aspect ratio.
    Stretch,
}

impl std::str::FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(ResizeMode::Crop),
            "stretch" => Ok(ResizeMode::Stretch),
            other => Err(Error::Config(format!("unknown resize mode `{other}` (crop|stretch)"))),
        }
    }
}

impl std::fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeMode::Crop => "crop",
            ResizeMode::Stretch => "stretch",
        })
    }
}

/// Catmull-Rom cubic convolution kernel (`a = −0.5`).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: the four source taps and their weights.
fn cubic_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let x = (o as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let frac = x - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for t in 0..4 {
                let offset = t as f64 - 1.0;
                let pos = (base + offset).clamp(0.0, (src_len - 1) as f64);
                idx[t] = pos as usize;
                wts[t] = cubic_weight(frac - offset);
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resampling of a `C×H×W` tensor with edge clamping and
/// pixel-center alignment. Values are not clamped.
pub fn resize_bicubic(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => (c, h, w),
        _ => return Err(Error::dim(format!("expected a non-empty C×H×W image, found {:?}", image.shape()))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be non-empty"));
    }
    let cols = cubic_taps(w, out_w);
    let rows = cubic_taps(h, out_h);
    let mut horizontal = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let src = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut horizontal[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (d, (idx, wts)) in dst.iter_mut().zip(&cols) {
                *d = (0..4).map(|t| src[idx[t]] as f64 * wts[t]).sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (idx, wts)) in rows.iter().enumerate() {
            for ox in 0..out_w {
                let v: f64 = (0..4)
                    .map(|t| horizontal[(ch * h + idx[t]) * out_w + ox] * wts[t])
                    .sum();
                out[(ch * out_h + oy) * out_w + ox] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn check_target_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(SPATIAL_FACTOR) {
        return Err(Error::Config(format!(
            "image size {size} must be a positive multiple of {SPATIAL_FACTOR}"
        )));
    }
    Ok(())
}

/// `3×S×S` tensor in `[0, 1]`.
pub fn resize_to_square(record: &ImageRecord, size: usize, mode: ResizeMode) -> Result<Tensor> {
    check_target_size(size)?;
    let src = record.to_tensor();
    let (w, h) = (record.width, record.height);
    let mut out = match mode {
        ResizeMode::Stretch => resize_bicubic(&src, size, size)?,
        ResizeMode::Crop => {
            let short = w.min(h) as f64;
            let scaled = |n: usize| ((n as f64 * size as f64 / short).round() as usize).max(size);
            let (sw, sh) = if w <= h { (size, scaled(h)) } else { (scaled(w), size) };
            let full = resize_bicubic(&src, sh, sw)?;
            crop_center(&full, size)?
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn crop_center(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("crop expects C×H×W")),
    };
    if h < size || w < size {
        return Err(Error::dim(format!("cannot crop {size}×{size} from {h}×{w}")));
    }
    let (y0, x0) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("expected C×H×W, found {:?}", image.shape()))),
    }
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = chw(image)?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

pub fn flip_vertical(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    let mut out = Vec::with_capacity(image.numel());
    for ch in 0..c {
        for y in (0..h).rev() {
            out.extend_from_slice(&image.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Rotates about the image center by `degrees` (counter-clockwise) with
/// bilinear sampling; samples outside the source read as black.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    let theta = degrees * PI / 180.0;
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let data = image.data();
    let fetch = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            data[(ch * h + y as usize) * w + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; image.numel()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let mut v = fetch(ch, y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx > 0.0 {
                    v += fetch(ch, y0, x0 + 1) * fx * (1.0 - fy);
                }
                if fy > 0.0 {
                    v += fetch(ch, y0 + 1, x0) * (1.0 - fx) * fy;
                }
                if fx > 0.0 && fy > 0.0 {
                    v += fetch(ch, y0 + 1, x0 + 1) * fx * fy;
                }
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Random horizontal flip (p = 0.5), vertical flip (p = 0.5) and rotation
/// uniform in ±15°.
pub fn augment_image<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let mut out = image.clone();
    if rng.gen_bool(0.5) {
        out = flip_horizontal(&out)?;
    }
    if rng.gen_bool(0.5) {
        out = flip_vertical(&out)?;
    }
    let angle = rng.gen_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES);
    rotate(&out, angle)
}

/// Augments each image of an `N×C×H×W` batch independently; deterministic in `seed`.
pub fn augment(batch: &Tensor, seed: u64) -> Result<Tensor> {
    let (n, ..) = batch.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| augment_image(&batch.index_outer(i)?, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

/// `round(0.8·n)`.
pub fn train_count(n: usize) -> usize {
    (8 * n + 5) / 10
}

/// Shuffles `0..n` by `seed` and cuts it into an 80% train prefix and 20%
/// validation suffix.
pub fn split_80_20(n: usize, seed: u64) -> DatasetSplit {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = order.split_off(train_count(n));
    DatasetSplit {
        train: order,
        validation,
        seed,
    }
}

/// Reshuffles `indices` by `epoch_seed` and chunks them; the final short
/// chunk is kept.
pub fn batches(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// An `N×3×H×W` batch and the dataset indices it was built from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub indices: Vec<usize>,
}

/// Resized images held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub sources: Vec<PathBuf>,
}

impl Dataset {
    pub fn from_records(records: &[ImageRecord], size: usize, mode: ResizeMode) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| resize_to_square(r, size, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            sources: records.iter().map(|r| r.path.clone()).collect(),
        })
    }

    pub fn from_images(images: Vec<Tensor>) -> Self {
        Dataset {
            sources: vec![PathBuf::new(); images.len()],
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given images, augmenting them when `augment_seed` is set.
    pub fn batch(&self, indices: &[usize], augment_seed: Option<u64>) -> Result<Batch> {
        let items = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .ok_or_else(|| Error::dim(format!("image index {i} out of range ({})", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut images = Tensor::stack(&items)?;
        if let Some(seed) = augment_seed {
            images = augment(&images, seed)?;
        }
        Ok(Batch {
            images,
            indices: indices.to_vec(),
        })
    }
}
