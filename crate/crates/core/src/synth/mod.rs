//! Synthetic concept images and planted activation stacks.
//!
//! Concept images are built by pasting randomly chosen, randomly rescaled
//! concept superpixels onto a canvas of uniform byte noise. Planted stacks
//! ([`planted`]) fabricate layer activations with known concept structure.

pub mod planted;

use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::par;
use crate::rng;
use crate::tensor_store::{Manifest, ManifestEntry, Role, StoreError};

pub use planted::{MixingMode, PlantedStack, PlantedStackSpec, Topology};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("superpixel pool is empty")]
    EmptyPool,
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask is {0}×{1} but image is {2}×{3}")]
    Resolution(usize, usize, usize, usize),
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("invalid planted stack spec: {0}")]
    InvalidSpec(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// A cropped concept patch: RGB pixels plus its cut-out mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Superpixel {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
    pub alpha: Vec<bool>,
    pub concept_label: String,
    pub source_sample_id: String,
}

impl Superpixel {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.pixels.len() != 3 * n || self.alpha.len() != n {
            return Err(SynthError::InvalidConfig(format!(
                "superpixel {}×{} has {} pixel bytes and {} alpha values",
                self.width,
                self.height,
                self.pixels.len(),
                self.alpha.len()
            )));
        }
        if !self.alpha.iter().any(|&a| a) {
            return Err(SynthError::EmptyMask);
        }
        Ok(())
    }

    fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Tight bounding-box crop of the masked part of `image`.
pub fn crop_superpixels(
    image: &RgbImage,
    mask: &BinaryMask,
    label: &str,
    sample_id: &str,
) -> Result<Superpixel> {
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    if (mask.width, mask.height) != (iw, ih) {
        return Err(SynthError::Resolution(mask.width, mask.height, iw, ih));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..ih {
        for x in 0..iw {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(SynthError::EmptyMask);
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut pixels = Vec::with_capacity(3 * w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            pixels.extend_from_slice(&image.get_pixel(x as u32, y as u32).0);
            alpha.push(mask.get(x, y));
        }
    }
    Ok(Superpixel {
        width: w,
        height: h,
        pixels,
        alpha,
        concept_label: label.to_string(),
        source_sample_id: sample_id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_width: 640,
            canvas_height: 480,
            patches_min: 1,
            patches_max: 5,
            scale_min: 0.9,
            scale_max: 1.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Face-crop preset: one patch per 178×218 canvas.
    pub fn single_patch_portrait(seed: u64) -> Self {
        Self {
            canvas_width: 178,
            canvas_height: 218,
            patches_min: 1,
            patches_max: 1,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return Err(SynthError::InvalidConfig("canvas dimensions must be at least 1".into()));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(SynthError::InvalidConfig(format!(
                "patch range [{}, {}] is invalid",
                self.patches_min, self.patches_max
            )));
        }
        if !(self.scale_min > 0.0) || !(self.scale_min <= self.scale_max) || !self.scale_max.is_finite() {
            return Err(SynthError::InvalidConfig(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub pool_index: usize,
    pub concept_label: String,
    /// Drawn rescale factor, within `[scale_min, scale_max]`.
    pub scale: f64,
    /// Extra shrink applied when the rescaled patch exceeded the canvas (1 otherwise).
    pub fit_scale: f64,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub placements: Vec<Placement>,
}

impl SynthSample {
    /// Pixels covered by some patch alpha, row-major over the canvas.
    pub fn coverage(&self, pool: &[Superpixel]) -> Vec<bool> {
        let (cw, ch) = (self.image.width() as usize, self.image.height() as usize);
        let mut covered = vec![false; cw * ch];
        for p in &self.placements {
            let alpha = scaled_alpha(&pool[p.pool_index], p.width, p.height);
            for y in 0..p.height {
                for x in 0..p.width {
                    if alpha[y * p.width + x] {
                        covered[(p.y + y) * cw + p.x + x] = true;
                    }
                }
            }
        }
        covered
    }
}

fn scaled_alpha(sp: &Superpixel, w: usize, h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * sp.height as f64 / h as f64) as usize).min(sp.height - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * sp.width as f64 / w as f64) as usize).min(sp.width - 1);
            out.push(sp.alpha[sy * sp.width + sx]);
        }
    }
    out
}

fn axis(out_index: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((out_index as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    (i0, (i0 + 1).min(in_len - 1), src - i0 as f64)
}

fn scaled_pixels(sp: &Superpixel, w: usize, h: usize) -> Vec<[u8; 3]> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, fy) = axis(y, sp.height, h);
        for x in 0..w {
            let (x0, x1, fx) = axis(x, sp.width, w);
            let (a, b, c, d) = (sp.rgb(x0, y0), sp.rgb(x1, y0), sp.rgb(x0, y1), sp.rgb(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = f64::from(a[ch]) + (f64::from(b[ch]) - f64::from(a[ch])) * fx;
                let bot = f64::from(c[ch]) + (f64::from(d[ch]) - f64::from(c[ch])) * fx;
                px[ch] = (top + (bot - top) * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.push(px);
        }
    }
    out
}

/// Composites one sample from `pool` using the caller's random stream.
pub fn generate_sample<R: Rng + ?Sized>(pool: &[Superpixel], config: &SynthConfig, rng: &mut R) -> Result<SynthSample> {
    if pool.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    config.validate()?;
    let (cw, ch) = (config.canvas_width, config.canvas_height);
    let mut noise = vec![0u8; cw * ch * 3];
    rng.fill_bytes(&mut noise);
    let mut image = RgbImage::from_raw(cw as u32, ch as u32, noise).expect("buffer sized to canvas");

    let count = rng.gen_range(config.patches_min..=config.patches_max);
    let mut placements = Vec::with_capacity(count);
    for _ in 0..count {
        let pool_index = rng.gen_range(0..pool.len());
        let sp = &pool[pool_index];
        let scale = rng.gen_range(config.scale_min..=config.scale_max);
        let mut w = ((sp.width as f64 * scale).round() as usize).max(1);
        let mut h = ((sp.height as f64 * scale).round() as usize).max(1);
        let mut fit_scale = 1.0;
        if w > cw || h > ch {
            fit_scale = (cw as f64 / w as f64).min(ch as f64 / h as f64);
            w = ((w as f64 * fit_scale).floor() as usize).clamp(1, cw);
            h = ((h as f64 * fit_scale).floor() as usize).clamp(1, ch);
        }
        let x = rng.gen_range(0..=cw - w);
        let y = rng.gen_range(0..=ch - h);
        let pixels = scaled_pixels(sp, w, h);
        let alpha = scaled_alpha(sp, w, h);
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                if alpha[i] {
                    image.put_pixel((x + px) as u32, (y + py) as u32, Rgb(pixels[i]));
                }
            }
        }
        placements.push(Placement {
            pool_index,
            concept_label: sp.concept_label.clone(),
            scale,
            fit_scale,
            x,
            y,
            width: w,
            height: h,
        });
    }
    Ok(SynthSample { image, placements })
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub sample_ids: Vec<String>,
    pub samples: Vec<SynthSample>,
    pub manifest: Manifest,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub sample_id: String,
    pub stream_seed: u64,
    pub width: usize,
    pub height: usize,
    pub placements: Vec<Placement>,
}

pub fn sample_id(index: usize) -> String {
    format!("synth-{index:05}")
}

/// `n_samples` samples; sample `i` draws from a stream derived from
/// `(config.seed, i)`, so output does not depend on scheduling.
pub fn generate_dataset(pool: &[Superpixel], config: &SynthConfig, n_samples: usize) -> Result<SynthDataset> {
    if n_samples == 0 {
        return Err(SynthError::NoSamples);
    }
    if pool.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    config.validate()?;
    let samples = par::map_indexed(n_samples, |i| {
        generate_sample(pool, config, &mut rng::child_stream(config.seed, i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sample_ids: Vec<String> = (0..n_samples).map(sample_id).collect();
    let entries = samples
        .iter()
        .zip(&sample_ids)
        .map(|(s, id)| {
            let labels: BTreeSet<&str> = s.placements.iter().map(|p| p.concept_label.as_str()).collect();
            ManifestEntry {
                sample_id: id.clone(),
                source_path: format!("{id}.png"),
                role: Role::Train,
                concept_label: Some(labels.into_iter().collect::<Vec<_>>().join("+")),
            }
        })
        .collect();
    Ok(SynthDataset {
        sample_ids,
        samples,
        manifest: Manifest::new(entries)?,
    })
}

impl SynthDataset {
    /// Writes `<id>.png` per sample, `provenance.json` and `synth.manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut provenance = Vec::with_capacity(self.samples.len());
        for (i, (s, id)) in self.samples.iter().zip(&self.sample_ids).enumerate() {
            s.image.save(dir.join(format!("{id}.png")))?;
            provenance.push(SampleProvenance {
                sample_id: id.clone(),
                stream_seed: rng::derive_seed(seed, i as u64),
                width: s.image.width() as usize,
                height: s.image.height() as usize,
                placements: s.placements.clone(),
            });
        }
        let text = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
        std::fs::write(dir.join("provenance.json"), text)?;
        self.manifest.save(dir.join("synth.manifest.json"))?;
        Ok(())
    }
}

/// A small built-in pool of geometric patches for demos and tests.
pub fn demo_pool() -> Vec<Superpixel> {
    let disc = |r: usize, color: [u8; 3], label: &str| {
        let d = 2 * r + 1;
        let mut pixels = Vec::with_capacity(3 * d * d);
        let mut alpha = Vec::with_capacity(d * d);
        for y in 0..d {
            for x in 0..d {
                let (dx, dy) = (x as f64 - r as f64, y as f64 - r as f64);
                let inside = dx * dx + dy * dy <= (r * r) as f64;
                let shade = if inside { 1.0 - 0.4 * (dx * dx + dy * dy).sqrt() / r as f64 } else { 0.0 };
                pixels.extend(color.iter().map(|&c| (f64::from(c) * shade) as u8));
                alpha.push(inside);
            }
        }
        Superpixel {
            width: d,
            height: d,
            pixels,
            alpha,
            concept_label: label.into(),
            source_sample_id: "demo".into(),
        }
    };
    let bar = |w: usize, h: usize, color: [u8; 3], label: &str| Superpixel {
        width: w,
        height: h,
        pixels: (0..w * h)
            .flat_map(|i| {
                let stripe = if ((i % w) / 4).is_multiple_of(2) { 1.0 } else { 0.7 };
                color.map(|c| (f64::from(c) * stripe) as u8)
            })
            .collect(),
        alpha: vec![true; w * h],
        concept_label: label.into(),
        source_sample_id: "demo".into(),
    };
    vec![
        disc(24, [230, 40, 40], "disc"),
        disc(12, [40, 40, 230], "dot"),
        bar(80, 16, [30, 200, 60], "bar"),
        bar(18, 70, [240, 200, 20], "post"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskMeta;
    use crate::tensor_store::LayerRef;

    fn meta() -> MaskMeta {
        MaskMeta {
            sample_id: "img".into(),
            concept_index: 0,
            source: LayerRef::new("img", "rgb").unwrap(),
        }
    }

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x * y) as u8]))
    }

    #[test]
    fn full_mask_crops_everything() {
        let img = test_image(5, 4);
        let mask = BinaryMask::from_fn(5, 4, meta(), 0.5, |_, _| true);
        let sp = crop_superpixels(&img, &mask, "all", "img").unwrap();
        assert_eq!((sp.width, sp.height), (5, 4));
        assert_eq!(sp.pixels, img.as_raw().clone());
        assert!(sp.alpha.iter().all(|&a| a));
    }

    #[test]
    fn point_mask_crops_one_pixel() {
        let img = test_image(6, 6);
        let mask = BinaryMask::from_fn(6, 6, meta(), 0.5, |x, y| (x, y) == (4, 2));
        let sp = crop_superpixels(&img, &mask, "pt", "img").unwrap();
        assert_eq!((sp.width, sp.height), (1, 1));
        assert_eq!(sp.pixels, img.get_pixel(4, 2).0.to_vec());
    }

    #[test]
    fn crop_errors() {
        let img = test_image(4, 4);
        let empty = BinaryMask::from_fn(4, 4, meta(), 0.5, |_, _| false);
        assert!(matches!(crop_superpixels(&img, &empty, "x", "img"), Err(SynthError::EmptyMask)));
        let small = BinaryMask::from_fn(3, 4, meta(), 0.5, |_, _| true);
        assert!(matches!(crop_superpixels(&img, &small, "x", "img"), Err(SynthError::Resolution(..))));
    }

    #[test]
    fn sample_respects_config() {
        let pool = demo_pool();
        let cfg = SynthConfig::default();
        let mut r = rng::stream(1);
        for _ in 0..20 {
            let s = generate_sample(&pool, &cfg, &mut r).unwrap();
            assert_eq!((s.image.width(), s.image.height()), (640, 480));
            assert!((1..=5).contains(&s.placements.len()));
            for p in &s.placements {
                assert!((0.9..=1.1).contains(&p.scale));
                assert!(p.x + p.width <= 640 && p.y + p.height <= 480);
            }
        }
    }

    #[test]
    fn oversized_patches_are_shrunk_to_fit() {
        let pool = demo_pool();
        let cfg = SynthConfig {
            canvas_width: 20,
            canvas_height: 20,
            ..SynthConfig::default()
        };
        let mut r = rng::stream(2);
        for _ in 0..20 {
            let s = generate_sample(&pool, &cfg, &mut r).unwrap();
            for p in &s.placements {
                assert!(p.width <= 20 && p.height <= 20);
                assert!(p.fit_scale <= 1.0);
            }
        }
    }

    #[test]
    fn portrait_preset_is_single_patch() {
        let cfg = SynthConfig::single_patch_portrait(0);
        let s = generate_sample(&demo_pool(), &cfg, &mut rng::stream(3)).unwrap();
        assert_eq!((s.image.width(), s.image.height()), (178, 218));
        assert_eq!(s.placements.len(), 1);
    }

    #[test]
    fn dataset_is_deterministic_and_seed_sensitive() {
        let pool = demo_pool();
        let cfg = SynthConfig {
            canvas_width: 64,
            canvas_height: 48,
            seed: 5,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&pool, &cfg, 3).unwrap();
        let b = generate_dataset(&pool, &cfg, 3).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.as_raw(), y.image.as_raw());
            assert_eq!(x.placements, y.placements);
        }
        let other = SynthConfig { seed: 6, ..cfg.clone() };
        let c = generate_dataset(&pool, &other, 1).unwrap();
        assert_ne!(a.samples[0].image.as_raw(), c.samples[0].image.as_raw());
        assert!(matches!(generate_dataset(&pool, &cfg, 0), Err(SynthError::NoSamples)));
        assert!(matches!(generate_dataset(&[], &cfg, 1), Err(SynthError::EmptyPool)));
        let labels = a.manifest.entries[0].concept_label.as_deref().unwrap();
        assert!(!labels.is_empty());
    }

    #[test]
    fn dataset_writes_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            canvas_width: 32,
            canvas_height: 32,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&demo_pool(), &cfg, 2).unwrap();
        ds.write(dir.path(), cfg.seed).unwrap();
        let img = image::open(dir.path().join("synth-00001.png")).unwrap().to_rgb8();
        assert_eq!(img.as_raw(), ds.samples[1].image.as_raw());
        assert!(dir.path().join("provenance.json").exists());
        assert!(Manifest::load(dir.path().join("synth.manifest.json")).is_ok());
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig {
            patches_min: 3,
            patches_max: 2,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            scale_min: 0.0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
