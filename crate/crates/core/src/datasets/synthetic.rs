//! Rendered stand-in fundus images.
//!
//! Each image is a dark, textured, vignetted retina with a bright optic disc
//! and a pale central cup. The cup-to-disc radius ratio is drawn from
//! `[0.25, 0.40]` for class 0 and `[0.55, 0.75]` for class 1, so the classes
//! separate on pale-area alone. The style changes background tint and texture
//! to imitate acquisition differences between sources.

use std::f32::consts::TAU;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetId, DatasetManifest, FundusRecord, Label};
use crate::error::{Error, Result};

pub const NORMAL_CUP_RATIO: (f32, f32) = (0.25, 0.40);
pub const GLAUCOMA_CUP_RATIO: (f32, f32) = (0.55, 0.75);

/// A pixel counts as "pale" when every channel exceeds this value.
pub const PALE_THRESHOLD: u8 = 215;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticStyle {
    Smooth,
    Striated,
    Mottled,
}

impl SyntheticStyle {
    pub fn for_dataset(id: DatasetId) -> Self {
        match id {
            DatasetId::Acrima | DatasetId::Synthetic => SyntheticStyle::Smooth,
            DatasetId::Origa => SyntheticStyle::Striated,
            DatasetId::RimOne => SyntheticStyle::Mottled,
        }
    }

    fn tint(self) -> [f32; 3] {
        match self {
            SyntheticStyle::Smooth => [150.0, 55.0, 25.0],
            SyntheticStyle::Striated => [120.0, 60.0, 40.0],
            SyntheticStyle::Mottled => [165.0, 80.0, 30.0],
        }
    }

    /// Background modulation in `[-1, 1]` at unit coordinates.
    fn texture(self, u: f32, v: f32, phase: f32) -> f32 {
        match self {
            SyntheticStyle::Smooth => 0.3 * (TAU * (u + v + phase)).sin(),
            SyntheticStyle::Striated => (TAU * 9.0 * (u * 0.8 + v * 0.6) + phase * TAU).sin(),
            SyntheticStyle::Mottled => {
                0.5 * (TAU * 5.0 * u + phase * TAU).sin() * (TAU * 4.0 * v - phase * TAU).cos()
                    + 0.5 * (TAU * 11.0 * (u - v)).sin()
            }
        }
    }

    fn noise_amp(self) -> f32 {
        match self {
            SyntheticStyle::Smooth => 6.0,
            SyntheticStyle::Striated => 10.0,
            SyntheticStyle::Mottled => 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub image_size: u32,
    pub seed: u64,
    pub dataset_id: DatasetId,
    pub style: SyntheticStyle,
}

impl SyntheticSpec {
    pub fn new(n_per_class: usize, image_size: u32, seed: u64) -> Self {
        Self { n_per_class, image_size, seed, dataset_id: DatasetId::Synthetic, style: SyntheticStyle::Smooth }
    }

    /// Stand-in for a named source, with its own style and seed stream.
    pub fn stand_in(dataset_id: DatasetId, n_per_class: usize, image_size: u32, seed: u64) -> Self {
        Self { n_per_class, image_size, seed, dataset_id, style: SyntheticStyle::for_dataset(dataset_id) }
    }
}

fn image_rng(seed: u64, label: Label, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.as_u8() as u64) << 40) | index as u64);
    rng
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one image. Pure function of its arguments.
pub fn render(size: u32, label: Label, style: SyntheticStyle, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let (lo, hi) = match label {
        Label::Normal => NORMAL_CUP_RATIO,
        Label::Glaucoma => GLAUCOMA_CUP_RATIO,
    };
    let cup_ratio = rng.random_range(lo..=hi);
    let disc_r = rng.random_range(0.15f32..0.18) * s;
    let cx = rng.random_range(0.38f32..0.62) * s;
    let cy = rng.random_range(0.40f32..0.60) * s;
    let cup_r = cup_ratio * disc_r;
    let phase = rng.random_range(0.0f32..1.0);
    let gain = rng.random_range(0.9f32..1.1);
    let tint = style.tint();
    let amp = style.noise_amp();
    let edge = (s / 150.0).max(0.75);

    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (u, v) = (px / s, py / s);
            // Circular field of view.
            let rf = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            let fov = 1.0 - smoothstep(0.44, 0.49, rf);
            let shade = (1.0 - 0.6 * rf) * (1.0 + 0.25 * style.texture(u, v, phase));
            let noise = rng.random_range(-amp..=amp);
            let mut c = [0f32; 3];
            for k in 0..3 {
                c[k] = (tint[k] * shade * gain + noise * (1.0 - 0.3 * k as f32)) * fov;
            }
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            let disc = 1.0 - smoothstep(disc_r - edge, disc_r + edge, d);
            let cup = 1.0 - smoothstep(cup_r - edge, cup_r + edge, d);
            let disc_col = [232.0, 178.0, 105.0];
            let cup_col = [252.0, 246.0, 228.0];
            for k in 0..3 {
                let inner = disc_col[k] + (cup_col[k] - disc_col[k]) * cup;
                c[k] = c[k] + (inner + 0.3 * noise - c[k]) * disc;
            }
            img.put_pixel(x, y, Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

pub fn file_name(label: Label, index: usize) -> String {
    format!("syn_{index:05}_c{}.png", label.as_u8())
}

/// Writes `2 * n_per_class` PNGs and a `labels.csv` sheet into `out_dir` and
/// returns the matching manifest. Record ids equal those produced by
/// ingesting `out_dir` with the `sidecar_csv` adapter.
pub fn generate_synthetic(out_dir: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.n_per_class == 0 {
        return Err(Error::Config("synthetic n_per_class must be at least 1".into()));
    }
    if spec.image_size < 8 {
        return Err(Error::Config(format!("synthetic image_size {} is too small (min 8)", spec.image_size)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut jobs: Vec<(Label, usize)> = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..spec.n_per_class {
        jobs.push((Label::Normal, i));
        jobs.push((Label::Glaucoma, i));
    }
    use rayon::prelude::*;
    let written: Vec<Result<(PathBuf, Label)>> = jobs
        .par_iter()
        .map(|&(label, i)| {
            let mut rng = image_rng(spec.seed, label, i);
            let img = render(spec.image_size, label, spec.style, &mut rng);
            let path = out_dir.join(file_name(label, i));
            img.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Image { path: path.clone(), message: other.to_string() },
            })?;
            Ok((path, label))
        })
        .collect();
    let mut pairs = written.into_iter().collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.0.cmp(&b.0));

    let sheet = out_dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&sheet).map_err(|e| Error::Data(format!("{}: {e}", sheet.display())))?;
    w.write_record(["filename", "label"]).and_then(|_| {
        for (p, l) in &pairs {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            w.write_record([name.as_ref(), &l.as_u8().to_string()])?;
        }
        Ok(())
    })
    .map_err(|e| Error::Data(format!("{}: {e}", sheet.display())))?;
    w.flush().map_err(|e| Error::io(&sheet, e))?;

    let records = pairs
        .into_iter()
        .map(|(path, label)| FundusRecord {
            record_id: format!("{}/{}", spec.dataset_id, path.file_name().unwrap_or_default().to_string_lossy()),
            dataset_id: spec.dataset_id,
            image_path: path,
            label,
            split: None,
        })
        .collect();
    DatasetManifest::new(spec.dataset_id, records)
}

/// Number of pale pixels in an image: the cup-area proxy.
pub fn pale_pixel_count(img: &RgbImage) -> usize {
    img.pixels().filter(|p| p.0.iter().all(|&c| c > PALE_THRESHOLD)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glaucoma_renders_have_more_pale_area() {
        for style in [SyntheticStyle::Smooth, SyntheticStyle::Striated, SyntheticStyle::Mottled] {
            let mut max_normal = 0;
            let mut min_glaucoma = usize::MAX;
            for i in 0..12 {
                let n = render(96, Label::Normal, style, &mut image_rng(3, Label::Normal, i));
                let g = render(96, Label::Glaucoma, style, &mut image_rng(3, Label::Glaucoma, i));
                max_normal = max_normal.max(pale_pixel_count(&n));
                min_glaucoma = min_glaucoma.min(pale_pixel_count(&g));
            }
            assert!(min_glaucoma > max_normal, "{style:?}: {min_glaucoma} <= {max_normal}");
        }
    }

    #[test]
    fn rendering_is_seed_deterministic() {
        let a = render(48, Label::Glaucoma, SyntheticStyle::Mottled, &mut image_rng(9, Label::Glaucoma, 4));
        let b = render(48, Label::Glaucoma, SyntheticStyle::Mottled, &mut image_rng(9, Label::Glaucoma, 4));
        let c = render(48, Label::Glaucoma, SyntheticStyle::Mottled, &mut image_rng(10, Label::Glaucoma, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
