//! Concept saliency masks: normalize → bilinear resize → binarize, and IoU.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factorizer::ConceptActivations;
use crate::par;
use crate::tensor_store::LayerRef;

pub const DEFAULT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
    #[error("resolution mismatch: {0}×{1} vs {2}×{3}")]
    Resolution(usize, usize, usize, usize),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPipelineConfig {
    pub output_width: usize,
    pub output_height: usize,
    pub threshold: f64,
}

impl Default for MaskPipelineConfig {
    fn default() -> Self {
        Self {
            output_width: 64,
            output_height: 64,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl MaskPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_width == 0 || self.output_height == 0 {
            return Err(MaskError::InvalidConfig("output dimensions must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(MaskError::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub sample_id: String,
    pub concept_index: usize,
    pub source: LayerRef,
}

/// Real-valued mask, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub meta: MaskMeta,
    /// Set when the raw plane was constant and normalized to all zeros.
    pub degenerate: bool,
}

/// Min-max normalization to `[0, 1]`. A constant plane becomes all zeros
/// with the degenerate flag set.
pub fn normalize_mask(raw: &[f64], width: usize, height: usize, meta: MaskMeta) -> ContinuousMask {
    assert_eq!(raw.len(), width * height, "mask plane length mismatch");
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    let values = if degenerate {
        vec![0.0; raw.len()]
    } else {
        let span = hi - lo;
        raw.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    };
    ContinuousMask {
        width,
        height,
        values,
        meta,
        degenerate,
    }
}

/// Source sample position and interpolation weight along one axis
/// (half-pixel centers, edge-clamped).
fn axis_sample(out_index: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((out_index as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
        .clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resize. Output pixel `(i, j)` samples the input at
/// `((j+0.5)·W/out_w − 0.5, (i+0.5)·H/out_h − 0.5)`, clamped to the edges.
pub fn resize_bilinear(mask: &ContinuousMask, out_w: usize, out_h: usize) -> ContinuousMask {
    assert!(out_w >= 1 && out_h >= 1, "output dimensions must be positive");
    let (w, h) = (mask.width, mask.height);
    let cols: Vec<_> = (0..out_w).map(|j| axis_sample(j, w, out_w)).collect();
    let mut values = Vec::with_capacity(out_w * out_h);
    for i in 0..out_h {
        let (y0, y1, fy) = axis_sample(i, h, out_h);
        let r0 = &mask.values[y0 * w..(y0 + 1) * w];
        let r1 = &mask.values[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &cols {
            let (a, b, c, d) = (r0[x0], r0[x1], r1[x0], r1[x1]);
            let v = lerp(lerp(a, b, fx), lerp(c, d, fx), fy);
            // keep rounding from escaping the neighbourhood's range
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            values.push(v.clamp(lo, hi));
        }
    }
    ContinuousMask {
        width: out_w,
        height: out_h,
        values,
        meta: mask.meta.clone(),
        degenerate: mask.degenerate,
    }
}

/// Bit-packed boolean mask, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    words: Vec<u64>,
    pub meta: MaskMeta,
    pub threshold_used: f64,
}

impl BinaryMask {
    pub fn from_fn(
        width: usize,
        height: usize,
        meta: MaskMeta,
        threshold_used: f64,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut words = vec![0u64; (width * height).div_ceil(64)];
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    let i = y * width + x;
                    words[i / 64] |= 1 << (i % 64);
                }
            }
        }
        Self {
            width,
            height,
            words,
            meta,
            threshold_used,
        }
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool], meta: MaskMeta) -> Self {
        assert_eq!(bits.len(), width * height, "mask length mismatch");
        Self::from_fn(width, height, meta, f64::NAN, |x, y| bits[y * width + x])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .collect()
    }

    /// Binary PGM (`P5`), 255 for set pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bools().into_iter().map(|b| if b { 255u8 } else { 0 }));
        out
    }

    /// Parses a binary PGM; any non-zero pixel is set.
    pub fn from_pgm(bytes: &[u8], meta: MaskMeta) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(MaskError::Pgm("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| MaskError::Pgm(e.to_string()))?);
        }
        if fields[0] != "P5" {
            return Err(MaskError::Pgm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| MaskError::Pgm(format!("{s:?}: {e}")));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(MaskError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let data = &bytes[(pos + 1).min(bytes.len())..];
        if data.len() < w * h {
            return Err(MaskError::Pgm(format!("expected {} pixels, found {}", w * h, data.len())));
        }
        Ok(Self::from_fn(w, h, meta, f64::NAN, |x, y| data[y * w + x] != 0))
    }
}

/// Pixel set iff `value ≥ threshold`.
pub fn binarize(mask: &ContinuousMask, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(mask.width, mask.height, mask.meta.clone(), threshold, |x, y| {
        mask.values[y * mask.width + x] >= threshold
    })
}

/// IoU outcome. Two empty masks carry no overlap information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlap {
    Value(f64),
    BothEmpty,
}

impl Overlap {
    pub fn value(self) -> Option<f64> {
        match self {
            Overlap::Value(v) => Some(v),
            Overlap::BothEmpty => None,
        }
    }
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MaskError::Resolution(a.width, a.height, b.width, b.height));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += u64::from((x & y).count_ones());
        union += u64::from((x | y).count_ones());
    }
    if union == 0 {
        return Ok(Overlap::BothEmpty);
    }
    Ok(Overlap::Value(inter as f64 / union as f64))
}

/// Normalized, resized masks for every (concept, sample) of one layer,
/// ready to be binarized at any threshold.
#[derive(Debug, Clone)]
pub struct ContinuousMaskSet {
    pub source: LayerRef,
    pub ncav_id: String,
    pub sample_ids: Vec<String>,
    pub n_concepts: usize,
    pub width: usize,
    pub height: usize,
    /// Indexed `concept * n_samples + sample`.
    pub masks: Vec<ContinuousMask>,
}

impl ContinuousMaskSet {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn concept(&self, k: usize) -> &[ContinuousMask] {
        let n = self.n_samples();
        &self.masks[k * n..(k + 1) * n]
    }

    pub fn degenerate_count(&self) -> usize {
        self.masks.iter().filter(|m| m.degenerate).count()
    }

    pub fn binarize(&self, threshold: f64) -> MaskSet {
        MaskSet {
            source: self.source.clone(),
            ncav_id: self.ncav_id.clone(),
            sample_ids: self.sample_ids.clone(),
            n_concepts: self.n_concepts,
            width: self.width,
            height: self.height,
            threshold,
            masks: par::map_indexed(self.masks.len(), |i| binarize(&self.masks[i], threshold)),
        }
    }
}

/// Normalizes and resizes every concept plane of `concepts`.
pub fn continuous_masks(concepts: &ConceptActivations, out_w: usize, out_h: usize) -> ContinuousMaskSet {
    let [n, k, h, w] = concepts.shape;
    let masks = par::map_indexed(n * k, |i| {
        let (concept, sample) = (i / n, i % n);
        let meta = MaskMeta {
            sample_id: concepts.sample_ids[sample].clone(),
            concept_index: concept,
            source: concepts.source.clone(),
        };
        let m = normalize_mask(concepts.plane(sample, concept), w, h, meta);
        resize_bilinear(&m, out_w, out_h)
    });
    ContinuousMaskSet {
        source: concepts.source.clone(),
        ncav_id: concepts.ncav_id.clone(),
        sample_ids: concepts.sample_ids.clone(),
        n_concepts: k,
        width: out_w,
        height: out_h,
        masks,
    }
}

/// Binary masks for all concepts and samples of one layer at one resolution.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub source: LayerRef,
    pub ncav_id: String,
    pub sample_ids: Vec<String>,
    pub n_concepts: usize,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    /// Indexed `concept * n_samples + sample`.
    pub masks: Vec<BinaryMask>,
}

impl MaskSet {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn concept(&self, k: usize) -> &[BinaryMask] {
        let n = self.n_samples();
        &self.masks[k * n..(k + 1) * n]
    }

    /// Set pixels per concept, summed over samples.
    pub fn true_pixels(&self) -> Vec<usize> {
        (0..self.n_concepts)
            .map(|k| self.concept(k).iter().map(BinaryMask::count).sum())
            .collect()
    }

    /// Writes one PGM per mask plus `index.json`.
    pub fn write_archive(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.masks.len());
        for k in 0..self.n_concepts {
            for (s, m) in self.concept(k).iter().enumerate() {
                let file = format!("c{k:02}_s{s:05}.pgm");
                std::fs::write(dir.join(&file), m.to_pgm())?;
                files.push(ArchiveEntry {
                    concept: k,
                    sample_id: self.sample_ids[s].clone(),
                    file,
                    true_pixels: m.count(),
                });
            }
        }
        let index = ArchiveIndex {
            source: self.source.clone(),
            ncav_id: self.ncav_id.clone(),
            width: self.width,
            height: self.height,
            threshold: self.threshold,
            n_concepts: self.n_concepts,
            sample_ids: self.sample_ids.clone(),
            files,
        };
        let text = serde_json::to_string_pretty(&index).map_err(|e| MaskError::Pgm(e.to_string()))?;
        std::fs::write(dir.join("index.json"), text)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct ArchiveIndex {
    source: LayerRef,
    ncav_id: String,
    width: usize,
    height: usize,
    threshold: f64,
    n_concepts: usize,
    sample_ids: Vec<String>,
    files: Vec<ArchiveEntry>,
}

#[derive(Serialize)]
struct ArchiveEntry {
    concept: usize,
    sample_id: String,
    file: String,
    true_pixels: usize,
}

/// The full pipeline for one layer: normalize → resize → binarize.
pub fn build_mask_set(concepts: &ConceptActivations, config: &MaskPipelineConfig) -> Result<MaskSet> {
    config.validate()?;
    Ok(continuous_masks(concepts, config.output_width, config.output_height).binarize(config.threshold))
}
