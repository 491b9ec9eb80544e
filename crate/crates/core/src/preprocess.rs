//! Image preprocessing: the minimal and enhanced regimes.
//!
//! Stage order is fixed:
//!
//! * minimal: `resize_rgb → scale_unit → [standardize]`
//! * enhanced: `hist_equalize → resize_rgb → scale_unit → contrast_normalize
//!   → augment (train only) → [standardize]`
//!
//! Everything before augmentation is deterministic and is exposed separately
//! as [`prepare`] so training can cache it; [`finish`] applies the stochastic
//! tail. [`run_pipeline`] chains both.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel statistics of the ImageNet training set, used by the backbone.
pub const BACKBONE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const BACKBONE_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueRange {
    /// `[0, 255]`.
    Byte,
    /// `[0, 1]`.
    Unit,
    /// Per-channel `(x - mean) / std` of a unit-range image.
    Standardized { mean: [f32; 3], std: [f32; 3] },
}

impl ValueRange {
    pub fn bounds(&self) -> Option<(f32, f32)> {
        match self {
            ValueRange::Byte => Some((0.0, 255.0)),
            ValueRange::Unit => Some((0.0, 1.0)),
            ValueRange::Standardized { .. } => None,
        }
    }
}

/// RGB image stored row-major as `H × W × 3` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!("image has zero dimension ({height}x{width})")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        let img = Self { height, width, data, range };
        if !img.in_range() {
            return Err(Error::Contract(format!("image values fall outside declared range {range:?}")));
        }
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3], range)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data, range: ValueRange::Byte }
    }

    /// Decodes any supported file and converts it to RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn in_range(&self) -> bool {
        match self.range.bounds() {
            Some((lo, hi)) => self.data.iter().all(|v| (lo..=hi).contains(v)),
            None => self.data.iter().all(|v| v.is_finite()),
        }
    }

    /// Planar `3 × H × W` copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Converts back to 8-bit RGB for viewing. Standardized images are
    /// mapped back to unit range first.
    pub fn to_rgb8(&self) -> RgbImage {
        let scale = |v: f32, c: usize| -> f32 {
            match self.range {
                ValueRange::Byte => v,
                ValueRange::Unit => v * 255.0,
                ValueRange::Standardized { mean, std } => (v * std[c] + mean[c]) * 255.0,
            }
        };
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            let rgb = [0, 1, 2].map(|c| scale(px[c], c).round().clamp(0.0, 255.0) as u8);
            img.put_pixel((i % self.width) as u32, (i / self.width) as u32, Rgb(rgb));
        }
        img
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Minimal,
    Enhanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Stop at `[0, 1]`.
    UnitRange,
    /// Standardize with [`BACKBONE_MEAN`] / [`BACKBONE_STD`].
    BackboneStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub target_size: usize,
    pub rotation_limit_deg: f64,
    /// Brightness multiplier is drawn from `[1 - limit, 1 + limit]`.
    pub brightness_limit: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub augment_in_eval: bool,
    pub seed: u64,
    pub normalize_mode: NormalizeMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Minimal,
            target_size: 224,
            rotation_limit_deg: 15.0,
            brightness_limit: 0.1,
            hflip: true,
            vflip: true,
            augment_in_eval: false,
            seed: 0,
            normalize_mode: NormalizeMode::BackboneStats,
        }
    }
}

impl PipelineConfig {
    pub fn enhanced() -> Self {
        Self { variant: Variant::Enhanced, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("preprocess.target_size must be positive".into()));
        }
        if !(0.0..180.0).contains(&self.rotation_limit_deg) {
            return Err(Error::Config(format!(
                "preprocess.rotation_limit_deg must be in [0, 180), got {}",
                self.rotation_limit_deg
            )));
        }
        if !(0.0..1.0).contains(&self.brightness_limit) {
            return Err(Error::Config(format!(
                "preprocess.brightness_limit must be in [0, 1), got {}",
                self.brightness_limit
            )));
        }
        if self.augment_in_eval {
            return Err(Error::Config("preprocess.augment_in_eval must be false: evaluation is never augmented".into()));
        }
        Ok(())
    }
}

/// Bilinear resize to `target × target` with half-pixel centres. Aspect
/// ratio is not preserved.
pub fn resize_rgb(img: &ImageBuffer, target: usize) -> Result<ImageBuffer> {
    if target == 0 {
        return Err(Error::Contract("resize target must be positive".into()));
    }
    if img.height == target && img.width == target {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(target, img.height);
    let xs = axis(target, img.width);
    let mut data = Vec::with_capacity(target * target * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = img.get(y0, x0, c) + (img.get(y0, x1, c) - img.get(y0, x0, c)) * fx;
                let bot = img.get(y1, x0, c) + (img.get(y1, x1, c) - img.get(y1, x0, c)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    clamp_to_range(&mut data, img.range);
    Ok(ImageBuffer { height: target, width: target, data, range: img.range })
}

fn clamp_to_range(data: &mut [f32], range: ValueRange) {
    if let Some((lo, hi)) = range.bounds() {
        data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Divides byte values by 255. A unit-range input is returned unchanged with
/// a warning.
pub fn scale_unit(img: &ImageBuffer) -> Result<ImageBuffer> {
    match img.range {
        ValueRange::Byte => Ok(ImageBuffer {
            data: img.data.iter().map(|v| v / 255.0).collect(),
            range: ValueRange::Unit,
            ..img.clone_meta()
        }),
        ValueRange::Unit => {
            log::warn!("scale_unit: image is already unit range; leaving it unchanged");
            Ok(img.clone())
        }
        ValueRange::Standardized { .. } => Err(Error::Contract("scale_unit expects a byte-range image".into())),
    }
}

const KR: f64 = 0.299;
const KB: f64 = 0.114;

/// Histogram equalization of the BT.601 luma channel; chroma is kept and
/// the result recombined to RGB. A constant-luma image is returned as is.
pub fn hist_equalize(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.range != ValueRange::Byte {
        return Err(Error::Contract("hist_equalize expects a byte-range image".into()));
    }
    let n = img.height * img.width;
    let mut ycc = Vec::with_capacity(n);
    let mut hist = [0usize; 256];
    for px in img.data.chunks_exact(3) {
        let (r, g, b) = (px[0].round() as f64, px[1].round() as f64, px[2].round() as f64);
        let y = KR * r + (1.0 - KR - KB) * g + KB * b;
        let cb = (b - y) / (2.0 * (1.0 - KB));
        let cr = (r - y) / (2.0 * (1.0 - KR));
        let level = y.round().clamp(0.0, 255.0) as usize;
        hist[level] += 1;
        ycc.push((level, cb, cr));
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return Ok(img.clone());
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<f64> = cdf
        .iter()
        .map(|&c| (((c.saturating_sub(cdf_min)) as f64 / denom) * 255.0).round())
        .collect();
    let mut data = Vec::with_capacity(n * 3);
    for (level, cb, cr) in ycc {
        let y = lut[level];
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / (1.0 - KR - KB);
        data.extend([r, g, b].map(|v| v.round().clamp(0.0, 255.0) as f32));
    }
    Ok(ImageBuffer { data, ..img.clone_meta() })
}

impl ImageBuffer {
    fn clone_meta(&self) -> ImageBuffer {
        ImageBuffer { height: self.height, width: self.width, data: Vec::new(), range: self.range }
    }
}

pub const CONTRAST_EPS: f64 = 1e-6;
pub const CONTRAST_CLIP: f64 = 3.0;

/// Global standardization over all pixels and channels, clipped to ±3σ and
/// mapped back into `[0, 1]`.
pub fn contrast_normalize(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.range != ValueRange::Unit {
        return Err(Error::Contract("contrast_normalize expects a unit-range image".into()));
    }
    let n = img.data.len() as f64;
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(CONTRAST_EPS);
    let data = img
        .data
        .iter()
        .map(|&v| {
            let z = ((v as f64 - mean) / std).clamp(-CONTRAST_CLIP, CONTRAST_CLIP);
            ((z + CONTRAST_CLIP) / (2.0 * CONTRAST_CLIP)) as f32
        })
        .collect();
    Ok(ImageBuffer { data, ..img.clone_meta() })
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSample {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f32,
    pub brightness: f32,
}

impl AugmentSample {
    pub const IDENTITY: AugmentSample = AugmentSample { hflip: false, vflip: false, angle_deg: 0.0, brightness: 1.0 };
}

/// Draws hflip, vflip, angle and brightness in that order. Every draw is
/// consumed even when a flip is disabled, so toggling one knob does not
/// shift the others.
pub fn sample_augment(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> AugmentSample {
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let lim = cfg.rotation_limit_deg;
    let angle_deg = if lim > 0.0 { rng.random_range(-lim..=lim) as f32 } else { 0.0 };
    let b = cfg.brightness_limit;
    let brightness = if b > 0.0 { rng.random_range(1.0 - b..=1.0 + b) as f32 } else { 1.0 };
    AugmentSample { hflip: hflip && cfg.hflip, vflip: vflip && cfg.vflip, angle_deg, brightness }
}

pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    let w = img.width;
    for y in 0..img.height {
        for x in 0..w {
            let (dst, src) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            out.data[dst..dst + 3].copy_from_slice(&img.data[src..src + 3]);
        }
    }
    out
}

pub fn vflip(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    let row = img.width * 3;
    for y in 0..img.height {
        let src = (img.height - 1 - y) * row;
        out.data[y * row..(y + 1) * row].copy_from_slice(&img.data[src..src + row]);
    }
    out
}

/// Mirrors a coordinate into `[0, n-1]` without repeating the edge sample.
fn reflect101(mut v: f32, n: usize) -> f32 {
    if n == 1 {
        return 0.0;
    }
    let hi = (n - 1) as f32;
    let period = 2.0 * hi;
    v = v.rem_euclid(period);
    if v > hi {
        period - v
    } else {
        v
    }
}

/// Rotation about the image centre by `angle_deg` (counter-clockwise),
/// bilinear, with reflected borders.
pub fn rotate(img: &ImageBuffer, angle_deg: f32) -> ImageBuffer {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (sin, cos) = (angle_deg.to_radians() as f64).sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map with the y axis pointing down.
            let sx = reflect101((cos * dx - sin * dy + cx) as f32, img.width);
            let sy = reflect101((sin * dx + cos * dy + cy) as f32, img.height);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..3 {
                let top = img.get(y0, x0, c) + (img.get(y0, x1, c) - img.get(y0, x0, c)) * fx;
                let bot = img.get(y1, x0, c) + (img.get(y1, x1, c) - img.get(y1, x0, c)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    clamp_to_range(&mut data, img.range);
    ImageBuffer { data, ..img.clone_meta() }
}

pub fn adjust_brightness(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    if factor == 1.0 {
        return img.clone();
    }
    let mut data: Vec<f32> = img.data.iter().map(|v| v * factor).collect();
    clamp_to_range(&mut data, img.range);
    ImageBuffer { data, ..img.clone_meta() }
}

/// Applies flips, then rotation, then brightness.
pub fn apply_augment(img: &ImageBuffer, s: &AugmentSample) -> ImageBuffer {
    let mut out = if s.hflip { hflip(img) } else { img.clone() };
    if s.vflip {
        out = vflip(&out);
    }
    out = rotate(&out, s.angle_deg);
    adjust_brightness(&out, s.brightness)
}

/// Random augmentation for a training pass of the enhanced pipeline.
pub fn augment(img: &ImageBuffer, cfg: &PipelineConfig, mode: RunMode, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    if mode == RunMode::Eval {
        return Err(Error::Contract("augment called during evaluation".into()));
    }
    if cfg.variant != Variant::Enhanced {
        return Err(Error::Contract("augment requires the enhanced pipeline".into()));
    }
    if matches!(img.range, ValueRange::Standardized { .. }) {
        return Err(Error::Contract("augment expects a byte- or unit-range image".into()));
    }
    Ok(apply_augment(img, &sample_augment(cfg, rng)))
}

pub fn standardize(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.range != ValueRange::Unit {
        return Err(Error::Contract("standardize expects a unit-range image".into()));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|px| [0, 1, 2].map(|c| (px[c] - BACKBONE_MEAN[c]) / BACKBONE_STD[c]))
        .collect();
    Ok(ImageBuffer {
        data,
        range: ValueRange::Standardized { mean: BACKBONE_MEAN, std: BACKBONE_STD },
        ..img.clone_meta()
    })
}

/// Deterministic head of the pipeline: everything up to augmentation.
pub fn prepare(img: &ImageBuffer, cfg: &PipelineConfig) -> Result<ImageBuffer> {
    match cfg.variant {
        Variant::Minimal => {
            let resized = resize_rgb(img, cfg.target_size)?;
            if resized.range == ValueRange::Unit {
                Ok(resized)
            } else {
                scale_unit(&resized)
            }
        }
        Variant::Enhanced => {
            let eq = hist_equalize(img)?;
            let scaled = scale_unit(&resize_rgb(&eq, cfg.target_size)?)?;
            contrast_normalize(&scaled)
        }
    }
}

/// Stochastic tail: augmentation (enhanced, train only) and standardization.
pub fn finish(prepared: &ImageBuffer, cfg: &PipelineConfig, mode: RunMode, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    let img = if cfg.variant == Variant::Enhanced && mode == RunMode::Train {
        augment(prepared, cfg, mode, rng)?
    } else {
        prepared.clone()
    };
    match cfg.normalize_mode {
        NormalizeMode::UnitRange => Ok(img),
        NormalizeMode::BackboneStats => standardize(&img),
    }
}

pub fn run_pipeline(img: &ImageBuffer, cfg: &PipelineConfig, mode: RunMode, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    finish(&prepare(img, cfg)?, cfg, mode, rng)
}

/// Writes `<stem>_before.png` (the decoded input) and `<stem>_after.png`
/// (one train-mode pass, shown in unit range) for each input.
pub fn write_preview(inputs: &[PathBuf], cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    use rand::SeedableRng;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let view = PipelineConfig { normalize_mode: NormalizeMode::UnitRange, ..cfg.clone() };
    let mut written = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let img = ImageBuffer::open(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let after = run_pipeline(&img, &view, RunMode::Train, &mut rng)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{i}"));
        for (suffix, im) in [("before", &img), ("after", &after)] {
            let p = out_dir.join(format!("{stem}_{suffix}.png"));
            im.to_rgb8().save(&p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() })?;
            written.push(p);
        }
    }
    Ok(written)
}
