//! Planted activation stacks with known concept maps and cross-layer structure.
//!
//! Every sample gets up to `K` disc-shaped concept regions that never overlap.
//! In an independent stack each layer is the concept maps pushed through a
//! seeded non-negative `K × C` mixing matrix, plus uniform noise in
//! `[0, noise_sigma)`. In a chained stack layer 0 is built the same way and
//! every later layer remixes the previous one through a zero-mean random
//! matrix and rectifies it (negatives to 0) before adding fresh
//! noise, so similarity decays with distance in depth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};
use crate::cav::{train_cav, ConceptDataset, TrainConfig};
use crate::factorizer::NcavSet;
use crate::linalg::{self, Matrix};
use crate::rng;
use crate::similarity::matching::max_score_assignment;
use crate::similarity::LayerConcepts;
use crate::tensor_store::{self, ActivationBatch, LayerRef, TensorDump};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingMode {
    Random,
    /// Requires `C = K`; concept `k` drives channel `k` only.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Independent,
    Chained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedStackSpec {
    pub n_samples: usize,
    pub n_concepts: usize,
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Chance that a concept appears in a sample.
    pub presence_probability: f64,
    pub mixing: MixingMode,
    pub topology: Topology,
}

impl Default for PlantedStackSpec {
    fn default() -> Self {
        Self {
            n_samples: 64,
            n_concepts: 4,
            channels: vec![32, 48],
            height: 16,
            width: 16,
            noise_sigma: 0.05,
            seed: 0,
            presence_probability: 1.0,
            mixing: MixingMode::Random,
            topology: Topology::Independent,
        }
    }
}

impl PlantedStackSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_samples == 0 || self.n_concepts == 0 {
            return fail("n_samples and n_concepts must be at least 1".into());
        }
        if self.channels.is_empty() {
            return fail("at least one layer is required".into());
        }
        if self.height == 0 || self.width == 0 {
            return fail("spatial dimensions must be at least 1".into());
        }
        let min_c = *self.channels.iter().min().expect("non-empty");
        if self.n_concepts > min_c {
            return fail(format!("{} concepts exceed the smallest layer ({min_c} channels)", self.n_concepts));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.presence_probability) {
            return fail(format!("presence_probability {} outside [0, 1]", self.presence_probability));
        }
        if self.mixing == MixingMode::Identity && self.channels.iter().any(|&c| c != self.n_concepts) {
            return fail("identity mixing needs every layer to have exactly n_concepts channels".into());
        }
        Ok(())
    }
}

/// Ground truth written next to the dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub spec: PlantedStackSpec,
    pub sample_ids: Vec<String>,
    /// Layer 0 (and every independent layer): `K × C`. Chained layers `t > 0`: `C_{t−1} × C_t`.
    pub mixings: Vec<Matrix>,
    /// Per sample, the concept owning each pixel (`-1` for background), row-major.
    pub regions: Vec<Vec<i32>>,
    pub presence: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct PlantedStack {
    pub layers: Vec<TensorDump>,
    /// `[N, K, H, W]` concept intensity maps.
    pub concept_maps: Vec<f64>,
    pub truth: PlantedTruth,
}

fn planted_id(n: usize) -> String {
    format!("p{n:05}")
}

/// Non-negative `k × c` mixing where each entry is nonzero with probability
/// 1/2; every row keeps at least one nonzero entry.
fn sparse_mixing<R: Rng>(k: usize, c: usize, r: &mut R) -> Matrix {
    let mut m = Matrix::from_fn(k, c, |_, _| if r.gen_bool(0.5) { r.gen_range(0.1..1.0) } else { 0.0 });
    for row in 0..k {
        if m.row(row).iter().all(|v| *v == 0.0) {
            let col = r.gen_range(0..c);
            m.set(row, col, r.gen_range(0.1..1.0));
        }
    }
    m
}

pub fn generate_planted_stack(spec: &PlantedStackSpec) -> Result<PlantedStack> {
    spec.validate()?;
    let (n, k, h, w) = (spec.n_samples, spec.n_concepts, spec.height, spec.width);
    let plane = h * w;
    let sample_ids: Vec<String> = (0..n).map(planted_id).collect();

    let min_side = h.min(w) as f64;
    let r_lo = (min_side / 8.0).max(1.0);
    let r_hi = (min_side / 3.0).max(r_lo);
    let mut concept_maps = vec![0.0; n * k * plane];
    let mut regions = Vec::with_capacity(n);
    let mut presence = Vec::with_capacity(n);
    for s in 0..n {
        let mut r = rng::child_stream(spec.seed, s as u64);
        let mut owner = vec![-1i32; plane];
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        for &c in &order {
            if r.gen::<f64>() >= spec.presence_probability {
                continue;
            }
            let cy = r.gen_range(0.0..h as f64);
            let cx = r.gen_range(0.0..w as f64);
            let radius = r.gen_range(r_lo..=r_hi);
            let amplitude = r.gen_range(0.5..1.5);
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                    let p = y * w + x;
                    if d <= radius && owner[p] < 0 {
                        owner[p] = c as i32;
                        concept_maps[(s * k + c) * plane + p] = amplitude * (1.0 - 0.5 * d / radius);
                    }
                }
            }
        }
        presence.push((0..k).map(|c| owner.contains(&(c as i32))).collect());
        regions.push(owner);
    }

    let mut layers = Vec::with_capacity(spec.channels.len());
    let mut mixings = Vec::with_capacity(spec.channels.len());
    let mut previous: Option<(Vec<f64>, usize)> = None;
    for (li, &c) in spec.channels.iter().enumerate() {
        let mut r = rng::child_stream(spec.seed ^ 0x5EED_0000_0000, li as u64);
        let chained_step = spec.topology == Topology::Chained && li > 0;
        let mut data = vec![0.0f64; n * c * plane];
        let mixing = if let (true, Some((prev, pc))) = (chained_step, previous.as_ref()) {
            // Zero-mean remix with unit expected gain: uniform on ±√(3/C_prev).
            let a = (3.0 / *pc as f64).sqrt();
            let m = Matrix::from_fn(*pc, c, |_, _| r.gen_range(-a..a));
            for s in 0..n {
                for j in 0..*pc {
                    let src = &prev[(s * pc + j) * plane..(s * pc + j + 1) * plane];
                    for ch in 0..c {
                        let wgt = m.get(j, ch);
                        let dst = &mut data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wgt * v;
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                *v = v.max(0.0);
            }
            m
        } else {
            let m = match spec.mixing {
                MixingMode::Identity => Matrix::from_fn(k, c, |i, j| if i == j { 1.0 } else { 0.0 }),
                MixingMode::Random => sparse_mixing(k, c, &mut r),
            };
            for s in 0..n {
                for kk in 0..k {
                    let src = &concept_maps[(s * k + kk) * plane..(s * k + kk + 1) * plane];
                    for ch in 0..c {
                        let wgt = m.get(kk, ch);
                        if wgt == 0.0 {
                            continue;
                        }
                        let dst = &mut data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wgt * v;
                        }
                    }
                }
            }
            m
        };
        if spec.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                *v += r.gen_range(0.0..spec.noise_sigma);
            }
        }
        let layer = LayerRef::new("planted", format!("layer{li}"))?;
        layers.push(TensorDump::new(
            layer,
            sample_ids.clone(),
            [n, c, h, w],
            data.iter().map(|&v| v as f32).collect(),
        )?);
        // Later layers are built from the stored f32 values, like a real network dump.
        previous = Some((data.iter().map(|&v| f64::from(v as f32)).collect(), c));
        mixings.push(mixing);
    }

    Ok(PlantedStack {
        layers,
        concept_maps,
        truth: PlantedTruth {
            spec: spec.clone(),
            sample_ids,
            mixings,
            regions,
            presence,
        },
    })
}

impl PlantedStack {
    pub fn sample_ids(&self) -> &[String] {
        &self.truth.sample_ids
    }

    pub fn batch(&self, layer: usize) -> ActivationBatch {
        self.layers[layer].to_batch()
    }

    /// Writes `layer<i>.actv` per layer plus `truth.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, d) in self.layers.iter().enumerate() {
            tensor_store::save_dump(d, dir.join(format!("layer{i}.actv")))?;
        }
        let text = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        std::fs::write(dir.join("truth.json"), text)?;
        Ok(())
    }

    /// Maps each mined NCAV of an independent layer to the planted concept
    /// whose mixing row it aligns with best (one-to-one, by cosine).
    pub fn assign_ncavs(&self, layer: usize, ncavs: &NcavSet) -> Vec<usize> {
        let mixing = &self.truth.mixings[layer];
        let score: Vec<Vec<f64>> = (0..ncavs.n_concepts)
            .map(|i| {
                (0..mixing.rows())
                    .map(|kk| {
                        let (a, b) = (ncavs.basis.row(i), mixing.row(kk));
                        linalg::dot(a, b) / (linalg::norm(a) * linalg::norm(b)).max(f64::MIN_POSITIVE)
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![usize::MAX; ncavs.n_concepts];
        for (i, kk) in max_score_assignment(&score) {
            out[i] = kk;
        }
        out
    }

    /// Ground-truth NCAV correspondence between two independent layers:
    /// pairs `(i, j)` whose mined concepts map to the same planted concept.
    pub fn expected_correspondence(&self, a: (usize, &NcavSet), b: (usize, &NcavSet)) -> Vec<(usize, usize)> {
        let ta = self.assign_ncavs(a.0, a.1);
        let tb = self.assign_ncavs(b.0, b.1);
        let mut pairs: Vec<(usize, usize)> = ta
            .iter()
            .enumerate()
            .filter_map(|(i, &kk)| tb.iter().position(|&x| x == kk).map(|j| (i, j)))
            .collect();
        pairs.sort();
        pairs
    }

    /// Concept labels used for supervised concepts: `concept<k>`.
    pub fn concept_label(k: usize) -> String {
        format!("concept{k}")
    }

    /// Trains one 1D/3D CAV per planted concept on each layer from `train_ids`
    /// (positives: concept present; negatives: absent) and pairs them with the
    /// `test_ids` activations. Concepts without both classes in the training
    /// split are skipped on every layer.
    pub fn layer_concepts(
        &self,
        train_ids: &[String],
        test_ids: &[String],
        config: &TrainConfig,
    ) -> crate::similarity::Result<Vec<LayerConcepts>> {
        let index = |id: &String| self.truth.sample_ids.iter().position(|s| s == id);
        let k = self.truth.spec.n_concepts;
        let mut splits = Vec::new();
        for kk in 0..k {
            let (pos, neg): (Vec<String>, Vec<String>) = train_ids
                .iter()
                .cloned()
                .partition(|id| index(id).is_some_and(|i| self.truth.presence[i][kk]));
            if !pos.is_empty() && !neg.is_empty() {
                splits.push((kk, pos, neg));
            }
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for dump in &self.layers {
            let select = |ids: &[String]| tensor_store::slice_batch(dump, ids).map_err(crate::cav::CavError::from);
            let mut cavs = Vec::with_capacity(splits.len());
            for (kk, pos, neg) in &splits {
                let ds = ConceptDataset {
                    positives: select(pos)?,
                    negatives: select(neg)?,
                    concept_label: Self::concept_label(*kk),
                };
                let cfg = TrainConfig {
                    seed: rng::derive_seed(config.seed, *kk as u64),
                    ..config.clone()
                };
                cavs.push(train_cav(&ds, &cfg)?);
            }
            out.push(LayerConcepts {
                layer: dump.layer().clone(),
                cavs,
                test: select(test_ids)?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorizer::{mine_ncavs, FactorizationConfig};

    #[test]
    fn spec_validation() {
        assert!(PlantedStackSpec::default().validate().is_ok());
        let bad = PlantedStackSpec {
            n_concepts: 40,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PlantedStackSpec {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PlantedStackSpec {
            mixing: MixingMode::Identity,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regions_are_disjoint_and_dumps_valid() {
        let spec = PlantedStackSpec {
            n_samples: 10,
            ..Default::default()
        };
        let stack = generate_planted_stack(&spec).unwrap();
        assert_eq!(stack.layers.len(), 2);
        for d in &stack.layers {
            d.validate().unwrap();
        }
        let plane = spec.height * spec.width;
        for s in 0..spec.n_samples {
            for p in 0..plane {
                let active: Vec<usize> = (0..spec.n_concepts)
                    .filter(|&c| stack.concept_maps[(s * spec.n_concepts + c) * plane + p] > 0.0)
                    .collect();
                assert!(active.len() <= 1);
                match active.first() {
                    Some(&c) => assert_eq!(stack.truth.regions[s][p], c as i32),
                    None => assert_eq!(stack.truth.regions[s][p], -1),
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PlantedStackSpec {
            n_samples: 4,
            ..Default::default()
        };
        let a = generate_planted_stack(&spec).unwrap();
        let b = generate_planted_stack(&spec).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.truth, b.truth);
        let c = generate_planted_stack(&PlantedStackSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.layers[0], c.layers[0]);
    }

    #[test]
    fn identity_mixing_is_recovered_exactly() {
        let spec = PlantedStackSpec {
            n_samples: 16,
            n_concepts: 4,
            channels: vec![4],
            noise_sigma: 0.0,
            mixing: MixingMode::Identity,
            seed: 3,
            ..Default::default()
        };
        let stack = generate_planted_stack(&spec).unwrap();
        let mut cfg = FactorizationConfig::new(4, 1);
        cfg.max_iterations = 5000;
        cfg.relative_tolerance = 1e-12;
        let set = mine_ncavs(&stack.batch(0), &cfg).unwrap();
        let assignment = stack.assign_ncavs(0, &set);
        for (i, &kk) in assignment.iter().enumerate() {
            let row = set.basis.row(i);
            assert!(row[kk] > 0.999, "row {i} -> {kk}: {row:?}");
        }
    }

    #[test]
    fn writes_truth_and_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let stack = generate_planted_stack(&PlantedStackSpec {
            n_samples: 3,
            ..Default::default()
        })
        .unwrap();
        stack.write(dir.path()).unwrap();
        let back = tensor_store::load_dump(dir.path().join("layer1.actv")).unwrap();
        assert_eq!(back, stack.layers[1]);
        let truth: PlantedTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth.regions, stack.truth.regions);
    }
}
