//! Supervised concept activation vectors.
//!
//! A CAV is the unit normal of a logistic-regression boundary separating a
//! concept's activations from the rest. 1D CAVs live in channel space and are
//! trained on spatially averaged activations; 3D CAVs use the full `C·H·W`
//! activation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::par;
use crate::rng;
use crate::tensor_store::{self, ActivationBatch, LayerRef, StoreError, TensorDump};

#[derive(Debug, Error)]
pub enum CavError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training produced a zero or non-finite weight vector")]
    DegenerateWeights,
    #[error("invalid CAV: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cav metadata: {0}")]
    Metadata(String),
}

pub type Result<T> = std::result::Result<T, CavError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "oneD")]
    OneD,
    #[serde(rename = "threeD")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub seed: u64,
    pub dimensionality: Dimensionality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2_penalty: 1e-3,
            seed: 0,
            dimensionality: Dimensionality::OneD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CavError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(CavError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(CavError::InvalidConfig("l2_penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConceptDataset {
    pub positives: ActivationBatch,
    pub negatives: ActivationBatch,
    pub concept_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub vector: Vec<f64>,
    /// `[C]` for 1D, `[C, H, W]` for 3D.
    pub shape: Vec<usize>,
    pub concept_label: String,
    pub source: LayerRef,
    pub train_accuracy: f64,
    pub dimensionality: Dimensionality,
}

impl Cav {
    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.vector.len() {
            return Err(CavError::Invalid(format!(
                "shape {:?} does not match length {}",
                self.shape,
                self.vector.len()
            )));
        }
        let n = linalg::norm(&self.vector);
        if (n - 1.0).abs() > 1e-9 {
            return Err(CavError::Invalid(format!("norm {n} is not 1")));
        }
        if !(0.0..=1.0).contains(&self.train_accuracy) {
            return Err(CavError::Invalid(format!("accuracy {}", self.train_accuracy)));
        }
        Ok(())
    }

    /// Writes `<stem>.cav` (tensor-store payload) and `<stem>.cav.json` (metadata).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let shape = match self.shape.as_slice() {
            [c] => [1, *c, 1, 1],
            [c, h, w] => [1, *c, *h, *w],
            other => return Err(CavError::Invalid(format!("unsupported shape {other:?}"))),
        };
        let dump = TensorDump::new(
            self.source.clone(),
            vec![self.concept_label.clone()],
            shape,
            self.vector.iter().map(|&v| v as f32).collect(),
        )?;
        tensor_store::save_dump(&dump, dir.join(format!("{stem}.cav")))?;
        let meta = CavMeta {
            concept_label: self.concept_label.clone(),
            source: self.source.clone(),
            train_accuracy: self.train_accuracy,
            dimensionality: self.dimensionality,
            shape: self.shape.clone(),
            payload: format!("{stem}.cav"),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CavError::Metadata(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.cav.json")), text).map_err(StoreError::from)?;
        Ok(())
    }

    /// Loads a CAV from its `.cav.json` metadata; the vector is renormalized
    /// after the `f32` round trip.
    pub fn load(meta_path: impl AsRef<Path>) -> Result<Self> {
        let meta_path = meta_path.as_ref();
        let text = std::fs::read_to_string(meta_path).map_err(StoreError::from)?;
        let meta: CavMeta = serde_json::from_str(&text).map_err(|e| CavError::Metadata(e.to_string()))?;
        let dir = meta_path.parent().unwrap_or_else(|| Path::new("."));
        let dump = tensor_store::load_dump(dir.join(&meta.payload))?;
        let mut vector: Vec<f64> = dump.data().iter().map(|&v| f64::from(v)).collect();
        let n = linalg::norm(&vector);
        if n == 0.0 {
            return Err(CavError::DegenerateWeights);
        }
        vector.iter_mut().for_each(|v| *v /= n);
        let cav = Cav {
            vector,
            shape: meta.shape,
            concept_label: meta.concept_label,
            source: meta.source,
            train_accuracy: meta.train_accuracy,
            dimensionality: meta.dimensionality,
        };
        cav.validate()?;
        Ok(cav)
    }
}

#[derive(Serialize, Deserialize)]
struct CavMeta {
    concept_label: String,
    source: LayerRef,
    train_accuracy: f64,
    dimensionality: Dimensionality,
    shape: Vec<usize>,
    payload: String,
}

/// Per-sample, per-channel mean over the `H×W` plane, as an `N × C` matrix.
///
/// Each plane is summed in sorted order, so any permutation of pixels
/// (a circular shift in particular) gives a bit-identical mean.
pub fn aggregate_spatial(batch: &ActivationBatch) -> Matrix {
    let [n, c, _, _] = batch.shape();
    let area = batch.plane_len() as f64;
    let mut out = Matrix::zeros(n, c);
    if c == 0 {
        return out;
    }
    par::for_each_chunk_mut(out.as_mut_slice(), c, |sample, row| {
        let mut buf = Vec::with_capacity(batch.plane_len());
        for (ch, o) in row.iter_mut().enumerate() {
            buf.clear();
            buf.extend_from_slice(batch.plane(sample, ch));
            buf.sort_unstable_by(f64::total_cmp);
            *o = buf.iter().sum::<f64>() / area;
        }
    });
    out
}

/// Feature rows used for training or scoring under `dim`.
fn features(batch: &ActivationBatch, dim: Dimensionality) -> Matrix {
    match dim {
        Dimensionality::OneD => aggregate_spatial(batch),
        Dimensionality::ThreeD => {
            let len = batch.channels() * batch.plane_len();
            Matrix::from_vec(batch.len(), len, batch.data().to_vec())
        }
    }
}

fn feature_shape(batch: &ActivationBatch, dim: Dimensionality) -> Vec<usize> {
    let [_, c, h, w] = batch.shape();
    match dim {
        Dimensionality::OneD => vec![c],
        Dimensionality::ThreeD => vec![c, h, w],
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized mean logistic loss over `±1` labels:
/// `(1/n) Σ log(1 + exp(−yᵢ(w·xᵢ + b))) + (λ/2)‖w‖²`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub l2_penalty: f64,
}

impl LogisticObjective {
    fn margin(&self, i: usize, w: &[f64], b: f64) -> f64 {
        self.labels[i] * (linalg::dot(self.features.row(i), w) + b)
    }

    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.labels.len() as f64;
        let data: f64 = (0..self.labels.len()).map(|i| softplus(-self.margin(i, w, b))).sum();
        data / n + 0.5 * self.l2_penalty * linalg::dot(w, w)
    }

    /// Gradient with respect to `(w, b)`.
    pub fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.labels.len() as f64;
        let mut gw: Vec<f64> = w.iter().map(|&wi| self.l2_penalty * wi).collect();
        let mut gb = 0.0;
        for i in 0..self.labels.len() {
            let coef = -self.labels[i] * sigmoid(-self.margin(i, w, b)) / n;
            gb += coef;
            for (g, &x) in gw.iter_mut().zip(self.features.row(i)) {
                *g += coef * x;
            }
        }
        (gw, gb)
    }
}

pub fn train_cav(dataset: &ConceptDataset, config: &TrainConfig) -> Result<Cav> {
    config.validate()?;
    let (pos, neg) = (&dataset.positives, &dataset.negatives);
    if pos.is_empty() {
        return Err(CavError::EmptySet("positive"));
    }
    if neg.is_empty() {
        return Err(CavError::EmptySet("negative"));
    }
    let [_, pc, ph, pw] = pos.shape();
    let [_, nc, nh, nw] = neg.shape();
    let compatible = match config.dimensionality {
        Dimensionality::OneD => pc == nc,
        Dimensionality::ThreeD => (pc, ph, pw) == (nc, nh, nw),
    };
    if !compatible {
        return Err(CavError::ShapeMismatch(format!(
            "positives {:?} vs negatives {:?}",
            pos.shape(),
            neg.shape()
        )));
    }

    let fp = features(pos, config.dimensionality);
    let fneg = features(neg, config.dimensionality);
    let dim = fp.cols();
    let mut stacked = fp.into_vec();
    stacked.extend_from_slice(fneg.as_slice());
    let n_total = pos.len() + neg.len();
    let objective = LogisticObjective {
        features: Matrix::from_vec(n_total, dim, stacked),
        labels: (0..n_total).map(|i| if i < pos.len() { 1.0 } else { -1.0 }).collect(),
        l2_penalty: config.l2_penalty,
    };

    let mut r = rng::stream(config.seed);
    let mut w: Vec<f64> = (0..dim).map(|_| r.gen_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    for _ in 0..config.epochs {
        let (gw, gb) = objective.gradient(&w, b);
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= config.learning_rate * g;
        }
        b -= config.learning_rate * gb;
    }

    let correct = (0..n_total)
        .filter(|&i| {
            let z = linalg::dot(objective.features.row(i), &w) + b;
            (z > 0.0) == (objective.labels[i] > 0.0)
        })
        .count();
    let norm = linalg::norm(&w);
    if norm == 0.0 || !norm.is_finite() {
        return Err(CavError::DegenerateWeights);
    }
    w.iter_mut().for_each(|v| *v /= norm);
    let cav = Cav {
        vector: w,
        shape: feature_shape(pos, config.dimensionality),
        concept_label: dataset.concept_label.clone(),
        source: pos.layer().clone(),
        train_accuracy: correct as f64 / n_total as f64,
        dimensionality: config.dimensionality,
    };
    cav.validate()?;
    Ok(cav)
}

/// A cosine value; `degenerate` marks a zero-norm activation, scored 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

fn cosine_raw(cav: &[f64], x: &[f64]) -> Cosine {
    let nx = linalg::norm(x);
    let nc = linalg::norm(cav);
    if nx == 0.0 || nc == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (linalg::dot(cav, x) / (nc * nx)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub fn cosine_similarity(cav: &Cav, activation: &[f64]) -> Result<Cosine> {
    if activation.len() != cav.vector.len() {
        return Err(CavError::ShapeMismatch(format!(
            "activation length {} vs CAV length {}",
            activation.len(),
            cav.vector.len()
        )));
    }
    Ok(cosine_raw(&cav.vector, activation))
}

/// Per-sample cosine similarities of one CAV against a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CsSeries {
    pub values: Vec<f64>,
    /// Indices of zero-norm samples (scored 0).
    pub degenerate: Vec<usize>,
}

pub fn cs_series(cav: &Cav, batch: &ActivationBatch) -> Result<CsSeries> {
    Ok(cs_series_many(&[cav], batch)?.remove(0))
}

/// [`cs_series`] for several CAVs over one batch; features are extracted
/// once per dimensionality.
pub fn cs_series_many(cavs: &[&Cav], batch: &ActivationBatch) -> Result<Vec<CsSeries>> {
    let mut cache: Vec<(Dimensionality, Matrix)> = Vec::new();
    let mut out = Vec::with_capacity(cavs.len());
    for cav in cavs {
        let shape = feature_shape(batch, cav.dimensionality);
        if shape != cav.shape {
            return Err(CavError::ShapeMismatch(format!(
                "batch features {shape:?} vs CAV {:?}",
                cav.shape
            )));
        }
        let idx = match cache.iter().position(|(d, _)| *d == cav.dimensionality) {
            Some(i) => i,
            None => {
                cache.push((cav.dimensionality, features(batch, cav.dimensionality)));
                cache.len() - 1
            }
        };
        let feats = &cache[idx].1;
        let cos = par::map_indexed(batch.len(), |i| cosine_raw(&cav.vector, feats.row(i)));
        out.push(CsSeries {
            values: cos.iter().map(|c| c.value).collect(),
            degenerate: cos
                .iter()
                .enumerate()
                .filter(|(_, c)| c.degenerate)
                .map(|(i, _)| i)
                .collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> LayerRef {
        LayerRef::new("m", "l").unwrap()
    }

    fn batch(prefix: &str, shape: [usize; 4], data: Vec<f64>) -> ActivationBatch {
        let ids = (0..shape[0]).map(|i| format!("{prefix}{i}")).collect();
        ActivationBatch::new(layer(), ids, shape, data).unwrap()
    }

    fn unit_cav(v: Vec<f64>) -> Cav {
        let n = linalg::norm(&v);
        Cav {
            shape: vec![v.len()],
            vector: v.into_iter().map(|x| x / n).collect(),
            concept_label: "c".into(),
            source: layer(),
            train_accuracy: 1.0,
            dimensionality: Dimensionality::OneD,
        }
    }

    #[test]
    fn aggregate_constant_and_mean() {
        let b = batch("s", [2, 3, 2, 2], vec![2.5; 24]);
        assert!(aggregate_spatial(&b).as_slice().iter().all(|&v| v == 2.5));
        let b = batch("s", [1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(aggregate_spatial(&b).as_slice(), &[2.5]);
    }

    #[test]
    fn aggregate_is_shift_invariant() {
        let (h, w) = (3, 5);
        let data: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 7919) % 101) as f64 * 0.013 - 0.4).collect();
        let b = batch("s", [2, 2, h, w], data.clone());
        let mut shifted = vec![0.0; data.len()];
        for plane in 0..4 {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = ((y + 1) % h, (x + 3) % w);
                    shifted[plane * h * w + sy * w + sx] = data[plane * h * w + y * w + x];
                }
            }
        }
        let s = batch("s", [2, 2, h, w], shifted);
        assert_eq!(aggregate_spatial(&b), aggregate_spatial(&s));
    }

    #[test]
    fn cosine_cases() {
        let cav = unit_cav(vec![1.0, 0.0]);
        assert_eq!(cosine_similarity(&cav, &[3.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&cav, &[0.0, 2.0]).unwrap().value, 0.0);
        let v = cosine_similarity(&cav, &[1.0, 1.0]).unwrap().value;
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let z = cosine_similarity(&cav, &[0.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        assert!(cosine_similarity(&cav, &[1.0]).is_err());
    }

    #[test]
    fn cs_series_basis_case() {
        let cav = unit_cav(vec![1.0, 0.0, 0.0]);
        // two samples whose planes average to e1 and e2
        let b = batch("s", [2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(cs_series(&cav, &b).unwrap().values, vec![1.0, 0.0]);
        let one = batch("s", [1, 3, 1, 1], vec![4.0, 0.0, 0.0]);
        assert_eq!(cs_series(&cav, &one).unwrap().values, vec![1.0]);
        let wrong = batch("s", [1, 2, 1, 1], vec![1.0, 0.0]);
        assert!(cs_series(&cav, &wrong).is_err());
    }

    #[test]
    fn cs_series_flags_dead_samples() {
        let cav = unit_cav(vec![1.0, 1.0]);
        let b = batch("s", [2, 2, 1, 1], vec![0.0, 0.0, 1.0, 1.0]);
        let s = cs_series(&cav, &b).unwrap();
        assert_eq!(s.degenerate, vec![0]);
        assert_eq!(s.values[0], 0.0);
    }

    fn separable(c: usize, n: usize, seed: u64) -> ConceptDataset {
        let mut r = rng::stream(seed);
        let mut make = |sign: f64, prefix: &str| {
            let mut data = Vec::with_capacity(n * c);
            for _ in 0..n {
                for ch in 0..c {
                    let base = if ch == 0 { sign } else { 0.0 };
                    data.push(base + r.gen_range(-0.1..0.1));
                }
            }
            batch(prefix, [n, c, 1, 1], data)
        };
        ConceptDataset {
            positives: make(1.0, "p"),
            negatives: make(-1.0, "n"),
            concept_label: "e1".into(),
        }
    }

    #[test]
    fn separable_data_recovers_normal() {
        let ds = separable(8, 50, 21);
        let cav = train_cav(&ds, &TrainConfig::default()).unwrap();
        assert_eq!(cav.train_accuracy, 1.0);
        assert!(cav.vector[0].abs() > 0.99);
        assert!((linalg::norm(&cav.vector) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn indistinguishable_classes() {
        let ds = separable(8, 50, 4);
        let same = ConceptDataset {
            positives: ds.positives.clone(),
            negatives: batch("n", ds.positives.shape(), ds.positives.data().to_vec()),
            concept_label: "none".into(),
        };
        let cav = train_cav(&same, &TrainConfig::default()).unwrap();
        assert!((cav.train_accuracy - 0.5).abs() <= 0.1);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let ds = ConceptDataset {
            positives: batch("p", [2, 8, 1, 1], vec![1.0; 16]),
            negatives: batch("n", [2, 4, 1, 1], vec![1.0; 8]),
            concept_label: "x".into(),
        };
        assert!(matches!(train_cav(&ds, &TrainConfig::default()), Err(CavError::ShapeMismatch(_))));
    }

    #[test]
    fn three_d_training_keeps_spatial_shape() {
        let pos = batch("p", [3, 2, 2, 2], (0..24).map(|i| if i % 8 < 4 { 1.0 } else { 0.1 }).collect());
        let neg = batch("n", [3, 2, 2, 2], (0..24).map(|i| if i % 8 < 4 { 0.1 } else { 1.0 }).collect());
        let ds = ConceptDataset {
            positives: pos.clone(),
            negatives: neg,
            concept_label: "x".into(),
        };
        let cfg = TrainConfig {
            dimensionality: Dimensionality::ThreeD,
            ..Default::default()
        };
        let cav = train_cav(&ds, &cfg).unwrap();
        assert_eq!(cav.shape, vec![2, 2, 2]);
        assert_eq!(cav.train_accuracy, 1.0);
        assert_eq!(cs_series(&cav, &pos).unwrap().values.len(), 3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = separable(4, 6, 8);
        let mut stacked = aggregate_spatial(&ds.positives).into_vec();
        stacked.extend(aggregate_spatial(&ds.negatives).into_vec());
        let obj = LogisticObjective {
            features: Matrix::from_vec(12, 4, stacked),
            labels: (0..12).map(|i| if i < 6 { 1.0 } else { -1.0 }).collect(),
            l2_penalty: 1e-3,
        };
        let w = vec![0.3, -0.2, 0.1, 0.05];
        let b = 0.07;
        let (gw, gb) = obj.gradient(&w, b);
        let h = 1e-6;
        for j in 0..4 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (obj.loss(&wp, b) - obj.loss(&wm, b)) / (2.0 * h);
            assert!((fd - gw[j]).abs() <= 1e-5 * gw[j].abs().max(1e-3), "{j}: {fd} vs {}", gw[j]);
        }
        let fd = (obj.loss(&w, b + h) - obj.loss(&w, b - h)) / (2.0 * h);
        assert!((fd - gb).abs() <= 1e-5 * gb.abs().max(1e-3));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let cav = train_cav(&separable(8, 10, 2), &TrainConfig::default()).unwrap();
        cav.save(dir.path(), "e1").unwrap();
        let back = Cav::load(dir.path().join("e1.cav.json")).unwrap();
        assert_eq!(back.concept_label, "e1");
        assert_eq!(back.shape, cav.shape);
        assert!(back.vector.iter().zip(&cav.vector).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
