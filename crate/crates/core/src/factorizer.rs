//! Mining of non-negative concept vectors (NCAVs) by matrix factorization.
//!
//! A layer's activations are flattened to `V` with one row per spatial
//! position (`N·H·W` rows, `C` columns) and factorized as `V ≈ S·P` with
//! `S ≥ 0` and `P ≥ 0` by Lee–Seung multiplicative updates on the squared
//! Frobenius loss. The rows of `P`, normalized to unit length, are the
//! mined concepts. New activations are mapped into concept space by solving
//! for `S` with `P` held fixed.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::par;
use crate::rng;
use crate::tensor_store::{self, ActivationBatch, LayerRef, StoreError, TensorDump};

pub const DEFAULT_MAX_ITERATIONS: usize = 200;
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROJECTION_ITERATIONS: usize = 50;

/// Stream index for the basis initialization, distinct from per-sample streams.
const BASIS_STREAM: u64 = 0x00BA_5150;

#[derive(Debug, Error)]
pub enum FactorizeError {
    #[error("invalid factorization config: {0}")]
    InvalidConfig(String),
    #[error("{concepts} concepts requested but the layer has only {channels} channels")]
    TooManyConcepts { concepts: usize, channels: usize },
    #[error("{concepts} concepts requested but only {rows} spatial positions are available")]
    TooFewPositions { concepts: usize, rows: usize },
    #[error("activation matrix is all zero after clamping")]
    AllZeroInput,
    #[error("channel mismatch: activations have {batch} channels, basis has {basis}")]
    ChannelMismatch { batch: usize, basis: usize },
    #[error("activation matrix has zero norm")]
    ZeroNorm,
    #[error("non-finite or negative factor entry after iteration {0}")]
    NumericalFailure(usize),
    #[error("invalid NCAV set: {0}")]
    InvalidBasis(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("ncav sidecar: {0}")]
    Sidecar(String),
}

pub type Result<T> = std::result::Result<T, FactorizeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorizationConfig {
    pub n_concepts: usize,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub seed: u64,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            n_concepts: 5,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            relative_tolerance: DEFAULT_RELATIVE_TOLERANCE,
            seed: 0,
        }
    }
}

impl FactorizationConfig {
    pub fn new(n_concepts: usize, seed: u64) -> Self {
        Self {
            n_concepts,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 {
            return Err(FactorizeError::InvalidConfig("n_concepts must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(FactorizeError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.relative_tolerance > 0.0) {
            return Err(FactorizeError::InvalidConfig("relative_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Mined concept basis for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcavSet {
    /// `C′ × C`, non-negative, unit-norm rows.
    pub basis: Matrix,
    pub source: LayerRef,
    pub n_concepts: usize,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_relative_error: f64,
    /// Relative reconstruction error before the first update and after each iteration.
    pub error_trace: Vec<f64>,
    /// Rows that collapsed to zero and were replaced by the uniform direction.
    #[serde(default)]
    pub dead_rows: Vec<usize>,
}

impl NcavSet {
    /// Builds a set from an explicit basis; rows are normalized here.
    pub fn from_basis(basis: Matrix, source: LayerRef) -> Result<Self> {
        let n_concepts = basis.rows();
        let mut set = Self {
            basis,
            source,
            n_concepts,
            seed: 0,
            iterations_run: 0,
            final_relative_error: f64::NAN,
            error_trace: Vec::new(),
            dead_rows: Vec::new(),
        };
        set.dead_rows = normalize_rows(&mut set.basis);
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, c) = (self.basis.rows(), self.basis.cols());
        if k != self.n_concepts || k == 0 || k > c {
            return Err(FactorizeError::InvalidBasis(format!(
                "basis is {k}×{c} with n_concepts {}",
                self.n_concepts
            )));
        }
        if self.basis.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(FactorizeError::InvalidBasis("negative or non-finite entry".into()));
        }
        for r in 0..k {
            let n = linalg::norm(self.basis.row(r));
            if (n - 1.0).abs() > 1e-9 {
                return Err(FactorizeError::InvalidBasis(format!("row {r} has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.basis.cols()
    }

    /// Stable identity used to tag projected activations.
    pub fn id(&self) -> String {
        format!("{}#ncav-k{}-seed{}", self.source, self.n_concepts, self.seed)
    }

    /// Writes `<stem>.ncav.json` and a `[1, C′, 1, C]` payload `<stem>.ncav.actv`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let payload_name = format!("{stem}.ncav.actv");
        let dump = TensorDump::new(
            self.source.clone(),
            vec!["basis".to_string()],
            [1, self.n_concepts, 1, self.channels()],
            self.basis.as_slice().iter().map(|&v| v as f32).collect(),
        )?;
        tensor_store::save_dump(&dump, dir.join(&payload_name))?;
        let sidecar = Sidecar {
            source: self.source.clone(),
            n_concepts: self.n_concepts,
            channels: self.channels(),
            seed: self.seed,
            iterations_run: self.iterations_run,
            final_relative_error: self.final_relative_error,
            error_trace: self.error_trace.clone(),
            dead_rows: self.dead_rows.clone(),
            payload: payload_name,
        };
        let path = dir.join(format!("{stem}.ncav.json"));
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| FactorizeError::Sidecar(e.to_string()))?;
        std::fs::write(&path, text).map_err(StoreError::from)?;
        Ok(path)
    }

    /// Loads a set written by [`NcavSet::save`]. Rows are renormalized after
    /// the `f32` round trip.
    pub fn load(sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let sidecar_path = sidecar_path.as_ref();
        let text = std::fs::read_to_string(sidecar_path).map_err(StoreError::from)?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| FactorizeError::Sidecar(e.to_string()))?;
        let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
        let dump = tensor_store::load_dump(dir.join(&sc.payload))?;
        if dump.shape() != [1, sc.n_concepts, 1, sc.channels] {
            return Err(FactorizeError::Sidecar(format!(
                "payload shape {:?} does not match {}×{}",
                dump.shape(),
                sc.n_concepts,
                sc.channels
            )));
        }
        let mut basis = Matrix::from_vec(
            sc.n_concepts,
            sc.channels,
            dump.data().iter().map(|&v| f64::from(v)).collect(),
        );
        normalize_rows(&mut basis);
        let set = Self {
            basis,
            source: sc.source,
            n_concepts: sc.n_concepts,
            seed: sc.seed,
            iterations_run: sc.iterations_run,
            final_relative_error: sc.final_relative_error,
            error_trace: sc.error_trace,
            dead_rows: sc.dead_rows,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    source: LayerRef,
    n_concepts: usize,
    channels: usize,
    seed: u64,
    iterations_run: usize,
    final_relative_error: f64,
    error_trace: Vec<f64>,
    #[serde(default)]
    dead_rows: Vec<usize>,
    payload: String,
}

/// Scales every row to unit length. Zero rows become the uniform direction;
/// their indices are returned.
fn normalize_rows(m: &mut Matrix) -> Vec<usize> {
    let cols = m.cols();
    let mut dead = Vec::new();
    for r in 0..m.rows() {
        let n = linalg::norm(m.row(r));
        let row = m.row_mut(r);
        if n > 0.0 && n.is_finite() {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            let u = 1.0 / (cols as f64).sqrt();
            row.iter_mut().for_each(|v| *v = u);
            dead.push(r);
        }
    }
    dead
}

/// Flattens a batch to `(N·H·W) × C`, clamping negatives to zero.
/// Row `(n·H + h)·W + w` holds the channel vector at that position.
fn flatten_clamped(batch: &ActivationBatch) -> Matrix {
    let [n, c, h, w] = batch.shape();
    let plane = h * w;
    let mut v = Matrix::zeros(n * plane, c);
    par::for_each_chunk_mut(v.as_mut_slice(), plane * c, |sample, chunk| {
        for ch in 0..c {
            let src = batch.plane(sample, ch);
            for (pos, &x) in src.iter().enumerate() {
                chunk[pos * c + ch] = x.max(0.0);
            }
        }
    });
    v
}

fn multiplicative_step(target: &mut [f64], numer: &[f64], denom: &[f64]) {
    for ((t, &a), &b) in target.iter_mut().zip(numer).zip(denom) {
        if b > 0.0 {
            *t *= a / b;
        }
    }
}

/// Mines `config.n_concepts` NCAVs from `batch`.
pub fn mine_ncavs(batch: &ActivationBatch, config: &FactorizationConfig) -> Result<NcavSet> {
    config.validate()?;
    let k = config.n_concepts;
    let [n, c, h, w] = batch.shape();
    let rows = n * h * w;
    if k > c {
        return Err(FactorizeError::TooManyConcepts { concepts: k, channels: c });
    }
    if k > rows {
        return Err(FactorizeError::TooFewPositions { concepts: k, rows });
    }

    let v = flatten_clamped(batch);
    let v_norm_sq = v.frobenius_sq();
    if v_norm_sq == 0.0 {
        return Err(FactorizeError::AllZeroInput);
    }
    let mean = v.as_slice().iter().sum::<f64>() / (rows * c) as f64;
    let scale = mean / k as f64;

    let mut basis_rng = rng::child_stream(config.seed, BASIS_STREAM);
    let mut p = Matrix::from_fn(k, c, |_, _| (1.0 - basis_rng.gen::<f64>()) * scale);

    // Each sample's coefficient rows come from a stream keyed by its id, so
    // reordering samples permutes the initialization along with V.
    let plane = h * w;
    let mut s = Matrix::zeros(rows, k);
    par::for_each_chunk_mut(s.as_mut_slice(), plane * k, |sample, chunk| {
        let id = &batch.sample_ids()[sample];
        let mut r = rng::stream(rng::derive_seed_bytes(config.seed, id.as_bytes()));
        chunk.iter_mut().for_each(|x| *x = (1.0 - r.gen::<f64>()) * scale);
    });

    let relative = |s: &Matrix, p: &Matrix| (v.residual_sq(s, p) / v_norm_sq).sqrt();
    let mut trace = vec![relative(&s, &p)];
    let mut iterations = 0;
    for it in 1..=config.max_iterations {
        let numer = s.t_mul(&v);
        let denom = s.t_mul(&s).mul(&p);
        multiplicative_step(p.as_mut_slice(), numer.as_slice(), denom.as_slice());

        let numer = v.mul_t(&p);
        let denom = s.mul(&p.mul_t(&p));
        multiplicative_step(s.as_mut_slice(), numer.as_slice(), denom.as_slice());

        let ok = |m: &Matrix| m.as_slice().iter().all(|x| *x >= 0.0 && x.is_finite());
        if !ok(&p) || !ok(&s) {
            return Err(FactorizeError::NumericalFailure(it));
        }

        iterations = it;
        let err = relative(&s, &p);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(err);
        if prev - err < config.relative_tolerance * prev {
            break;
        }
    }

    let dead_rows = normalize_rows(&mut p);
    let set = NcavSet {
        basis: p,
        source: batch.layer().clone(),
        n_concepts: k,
        seed: config.seed,
        iterations_run: iterations,
        final_relative_error: *trace.last().expect("non-empty"),
        error_trace: trace,
        dead_rows,
    };
    set.validate()?;
    Ok(set)
}

/// Concept-space activations `[N, C′, H, W]` produced by [`project`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptActivations {
    pub source: LayerRef,
    pub ncav_id: String,
    pub sample_ids: Vec<String>,
    /// `[N, C′, H, W]`
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl ConceptActivations {
    pub fn n_concepts(&self) -> usize {
        self.shape[1]
    }

    pub fn plane(&self, sample: usize, concept: usize) -> &[f64] {
        let p = self.shape[2] * self.shape[3];
        let start = (sample * self.shape[1] + concept) * p;
        &self.data[start..start + p]
    }
}

/// Non-negative coefficients of `x` against a fixed basis, by multiplicative updates.
///
/// `gram` is `P·Pᵀ`. The start point is the uniform vector `‖x‖/C′`.
fn solve_coefficients(x: &[f64], basis: &Matrix, gram: &Matrix, iterations: usize, out: &mut [f64]) {
    let k = basis.rows();
    let numer: Vec<f64> = (0..k).map(|r| linalg::dot(basis.row(r), x)).collect();
    let start = linalg::norm(x) / k as f64;
    out.iter_mut().for_each(|s| *s = start);
    if start == 0.0 {
        return;
    }
    let mut denom = vec![0.0; k];
    for _ in 0..iterations {
        for (r, d) in denom.iter_mut().enumerate() {
            *d = linalg::dot(gram.row(r), out);
        }
        multiplicative_step(out, &numer, &denom);
    }
}

pub fn project(batch: &ActivationBatch, ncavs: &NcavSet) -> Result<ConceptActivations> {
    project_with(batch, ncavs, DEFAULT_PROJECTION_ITERATIONS)
}

/// [`project`] with an explicit iteration count.
pub fn project_with(
    batch: &ActivationBatch,
    ncavs: &NcavSet,
    iterations: usize,
) -> Result<ConceptActivations> {
    let [n, c, h, w] = batch.shape();
    if c != ncavs.channels() {
        return Err(FactorizeError::ChannelMismatch {
            batch: c,
            basis: ncavs.channels(),
        });
    }
    let k = ncavs.n_concepts;
    let plane = h * w;
    let basis = &ncavs.basis;
    let gram = basis.mul_t(basis);
    let mut data = vec![0.0; n * k * plane];
    par::for_each_chunk_mut(&mut data, k * plane, |sample, chunk| {
        let mut x = vec![0.0; c];
        let mut coeffs = vec![0.0; k];
        for pos in 0..plane {
            for (ch, xv) in x.iter_mut().enumerate() {
                *xv = batch.plane(sample, ch)[pos].max(0.0);
            }
            solve_coefficients(&x, basis, &gram, iterations, &mut coeffs);
            for (r, &s) in coeffs.iter().enumerate() {
                chunk[r * plane + pos] = s;
            }
        }
    });
    Ok(ConceptActivations {
        source: batch.layer().clone(),
        ncav_id: ncavs.id(),
        sample_ids: batch.sample_ids().to_vec(),
        shape: [n, k, h, w],
        data,
    })
}

/// `‖V − S·P‖_F / ‖V‖_F` with `S` from [`project`] and `V` the clamped activations.
pub fn reconstruction_error(batch: &ActivationBatch, ncavs: &NcavSet) -> Result<f64> {
    let concepts = project(batch, ncavs)?;
    let v = flatten_clamped(batch);
    let v_norm_sq = v.frobenius_sq();
    if v_norm_sq == 0.0 {
        return Err(FactorizeError::ZeroNorm);
    }
    let [n, k, h, w] = concepts.shape;
    let plane = h * w;
    let mut s = Matrix::zeros(n * plane, k);
    for sample in 0..n {
        for r in 0..k {
            for (pos, &val) in concepts.plane(sample, r).iter().enumerate() {
                s.set(sample * plane + pos, r, val);
            }
        }
    }
    Ok((v.residual_sq(&s, &ncavs.basis) / v_norm_sq).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> LayerRef {
        LayerRef::new("m", "l").unwrap()
    }

    fn batch(shape: [usize; 4], data: Vec<f64>) -> ActivationBatch {
        let ids = (0..shape[0]).map(|i| format!("s{i}")).collect();
        ActivationBatch::new(layer(), ids, shape, data).unwrap()
    }

    /// Rank-one batch `x[n, c, h, w] = s[n,h,w] · p[c]` with known factors.
    fn rank_one(n: usize, hw: usize, p: &[f64]) -> ActivationBatch {
        let c = p.len();
        let mut data = vec![0.0; n * c * hw];
        for i in 0..n {
            for pos in 0..hw {
                let s = 0.2 + ((i * 7 + pos * 3) % 11) as f64 / 5.0;
                for (ch, &pv) in p.iter().enumerate() {
                    data[(i * c + ch) * hw + pos] = s * pv;
                }
            }
        }
        batch([n, c, 1, hw], data)
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        linalg::dot(a, b) / (linalg::norm(a) * linalg::norm(b))
    }

    #[test]
    fn planted_rank_one_is_recovered() {
        let p = [0.1, 0.9, 0.0, 0.4, 0.3, 0.7];
        let b = rank_one(6, 5, &p);
        let cfg = FactorizationConfig {
            n_concepts: 1,
            seed: 3,
            ..Default::default()
        };
        let set = mine_ncavs(&b, &cfg).unwrap();
        assert!(set.final_relative_error < 1e-6, "error {}", set.final_relative_error);
        assert!(cosine(set.basis.row(0), &p).abs() > 0.999);
    }

    #[test]
    fn error_trace_is_non_increasing() {
        let data: Vec<f64> = (0..4 * 6 * 9).map(|i| ((i * 37 % 29) as f64 / 7.0) - 0.5).collect();
        let b = batch([4, 6, 3, 3], data);
        let cfg = FactorizationConfig {
            n_concepts: 3,
            relative_tolerance: 1e-12,
            seed: 11,
            ..Default::default()
        };
        let set = mine_ncavs(&b, &cfg).unwrap();
        assert!(set.error_trace.len() > 2);
        for pair in set.error_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10, "{} -> {}", pair[0], pair[1]);
        }
        assert!(set.basis.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let zeros = batch([2, 3, 2, 2], vec![0.0; 24]);
        assert!(matches!(mine_ncavs(&zeros, &FactorizationConfig::new(2, 0)), Err(FactorizeError::AllZeroInput)));

        // Negative-only input clamps to zero as well.
        let neg = batch([2, 3, 2, 2], vec![-1.0; 24]);
        assert!(matches!(mine_ncavs(&neg, &FactorizationConfig::new(2, 0)), Err(FactorizeError::AllZeroInput)));

        let ones = batch([2, 3, 2, 2], vec![1.0; 24]);
        assert!(matches!(
            mine_ncavs(&ones, &FactorizationConfig::new(4, 0)),
            Err(FactorizeError::TooManyConcepts { concepts: 4, channels: 3 })
        ));
        let tiny = batch([1, 3, 1, 1], vec![1.0; 3]);
        assert!(matches!(
            mine_ncavs(&tiny, &FactorizationConfig::new(2, 0)),
            Err(FactorizeError::TooFewPositions { .. })
        ));
        assert!(mine_ncavs(&ones, &FactorizationConfig::new(0, 0)).is_err());
    }

    #[test]
    fn same_seed_same_basis() {
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 5) as f64).collect();
        let b = batch([3, 4, 2, 2], data);
        let a = mine_ncavs(&b, &FactorizationConfig::new(2, 9)).unwrap();
        let c = mine_ncavs(&b, &FactorizationConfig::new(2, 9)).unwrap();
        assert_eq!(a, c);
    }

    fn orthogonal_basis() -> NcavSet {
        // Disjoint supports make the rows orthogonal.
        let m = Matrix::from_vec(
            3,
            5,
            vec![
                0.6, 0.8, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.6, 0.8,
            ],
        );
        NcavSet::from_basis(m, layer()).unwrap()
    }

    #[test]
    fn projection_of_scaled_basis_row() {
        let set = orthogonal_basis();
        for i in 0..3 {
            let x: Vec<f64> = set.basis.row(i).iter().map(|v| 3.0 * v).collect();
            let b = batch([1, 5, 1, 1], x);
            let ca = project(&b, &set).unwrap();
            for r in 0..3 {
                let s = ca.plane(0, r)[0];
                if r == i {
                    assert!((s - 3.0).abs() < 1e-9, "coefficient {s}");
                } else {
                    assert!(s < 1e-4);
                }
            }
        }
    }

    #[test]
    fn projection_of_zero_and_mismatch() {
        let set = orthogonal_basis();
        let b = batch([1, 5, 2, 1], vec![0.0; 10]);
        let ca = project(&b, &set).unwrap();
        assert!(ca.data.iter().all(|&v| v == 0.0));
        assert_eq!(ca.shape, [1, 3, 2, 1]);

        let b4 = batch([1, 4, 1, 1], vec![1.0; 4]);
        assert!(matches!(project(&b4, &set), Err(FactorizeError::ChannelMismatch { batch: 4, basis: 5 })));
    }

    #[test]
    fn reconstruction_error_cases() {
        let set = orthogonal_basis();
        // Generated from the basis with non-negative coefficients.
        let mut data = vec![0.0; 4 * 5];
        for pos in 0..4 {
            for ch in 0..5 {
                let v: f64 = (0..3).map(|r| (1.0 + (r + pos) as f64) * set.basis.get(r, ch)).sum();
                data[ch * 4 + pos] = v;
            }
        }
        let exact = batch([1, 5, 2, 2], data);
        assert!(reconstruction_error(&exact, &set).unwrap() < 1e-4);

        let narrow = NcavSet::from_basis(Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]), layer()).unwrap();
        let off = batch([1, 3, 1, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!((reconstruction_error(&off, &narrow).unwrap() - 1.0).abs() < 1e-12);

        let zero = batch([1, 3, 1, 1], vec![0.0; 3]);
        assert!(matches!(reconstruction_error(&zero, &narrow), Err(FactorizeError::ZeroNorm)));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| ((i * 13) % 7) as f64).collect();
        let set = mine_ncavs(&batch([2, 4, 2, 2], data), &FactorizationConfig::new(2, 5)).unwrap();
        let path = set.save(dir.path(), "layer").unwrap();
        assert!(dir.path().join("layer.ncav.actv").exists());
        let back = NcavSet::load(path).unwrap();
        assert_eq!(back.n_concepts, 2);
        assert_eq!(back.error_trace, set.error_trace);
        for (a, b) in back.basis.as_slice().iter().zip(set.basis.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
