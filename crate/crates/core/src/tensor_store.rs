//! Activation dump file format, dataset manifests and batch slicing.
//!
//! An `.actv` file is laid out as
//!
//! ```text
//! "ACTV" | version: u32 LE (= 1) | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! where the header is `{"model_id", "layer_id", "sample_ids", "dtype", "shape"}`
//! and the payload holds `N·C·H·W` little-endian `f32` values, row-major over
//! `[N, C, H, W]` with `W` varying fastest.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ACTV";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on the JSON header, guards against allocating from garbage lengths.
const MAX_HEADER_LEN: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic bytes {0:?}, expected \"ACTV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: expected {expected} bytes, got {got}")]
    Truncated {
        section: &'static str,
        expected: u64,
        got: u64,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: shape {shape:?} needs {expected} values, got {got}")]
    ShapeMismatch {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    ZeroDimension([usize; 4]),
    #[error("{got} sample ids for batch size {expected}")]
    SampleCount { expected: usize, got: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Identifies one layer of one model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerRef {
    pub model_id: String,
    pub layer_id: String,
}

impl LayerRef {
    pub fn new(model_id: impl Into<String>, layer_id: impl Into<String>) -> Result<Self> {
        let r = Self {
            model_id: model_id.into(),
            layer_id: layer_id.into(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(StoreError::EmptyField("model_id"));
        }
        if self.layer_id.is_empty() {
            return Err(StoreError::EmptyField("layer_id"));
        }
        Ok(())
    }
}

impl std::fmt::Display for LayerRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.model_id, self.layer_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

/// Serialized header. Field order here is the byte order in the file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_id: String,
    layer_id: String,
    sample_ids: Vec<String>,
    dtype: Dtype,
    shape: [usize; 4],
}

/// One layer's activations for `N` samples, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    layer: LayerRef,
    sample_ids: Vec<String>,
    shape: [usize; 4],
    data: Vec<f32>,
}

impl TensorDump {
    pub fn new(
        layer: LayerRef,
        sample_ids: Vec<String>,
        shape: [usize; 4],
        data: Vec<f32>,
    ) -> Result<Self> {
        let dump = Self {
            layer,
            sample_ids,
            shape,
            data,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        validate_shape(self.shape, self.data.len())?;
        validate_ids(&self.sample_ids, self.shape[0])
    }

    pub fn layer(&self) -> &LayerRef {
        &self.layer
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// The whole dump as a batch, in stored sample order.
    pub fn to_batch(&self) -> ActivationBatch {
        ActivationBatch {
            layer: self.layer.clone(),
            sample_ids: self.sample_ids.clone(),
            shape: self.shape,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

fn validate_shape(shape: [usize; 4], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(StoreError::ZeroDimension(shape));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(StoreError::ShapeMismatch {
            shape,
            expected: usize::MAX,
            got: len,
        })?;
    if expected != len {
        return Err(StoreError::ShapeMismatch {
            shape,
            expected,
            got: len,
        });
    }
    Ok(())
}

fn validate_ids(ids: &[String], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(StoreError::SampleCount {
            expected: n,
            got: ids.len(),
        });
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateSample(id.clone()));
        }
    }
    Ok(())
}

/// Writes `dump` and returns the number of bytes emitted.
///
/// The dump is validated before anything touches the sink.
pub fn write_dump<W: Write>(dump: &TensorDump, sink: &mut W) -> Result<u64> {
    dump.validate()?;
    let header = Header {
        model_id: dump.layer.model_id.clone(),
        layer_id: dump.layer.layer_id.clone(),
        sample_ids: dump.sample_ids.clone(),
        dtype: Dtype::F32,
        shape: dump.shape,
    };
    let header = serde_json::to_vec(&header).map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let mut payload = Vec::with_capacity(dump.data.len() * 4);
    for v in &dump.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&(header.len() as u64).to_le_bytes())?;
    sink.write_all(&header)?;
    sink.write_all(&payload)?;
    Ok((4 + 4 + 8 + header.len() + payload.len()) as u64)
}

/// Reads exactly `buf.len()` bytes, reporting a short read as truncation.
fn read_section<R: Read>(source: &mut R, buf: &mut [u8], section: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(StoreError::Truncated {
                    section,
                    expected: buf.len() as u64,
                    got: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_dump<R: Read>(source: &mut R) -> Result<TensorDump> {
    let mut magic = [0u8; 4];
    read_section(source, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    read_section(source, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let mut len = [0u8; 8];
    read_section(source, &mut len, "header length")?;
    let header_len = u64::from_le_bytes(len);
    if header_len > MAX_HEADER_LEN {
        return Err(StoreError::MalformedHeader(format!(
            "header length {header_len} exceeds limit"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    read_section(source, &mut header, "header")?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let layer = LayerRef {
        model_id: header.model_id,
        layer_id: header.layer_id,
    };
    if header.shape.contains(&0) {
        return Err(StoreError::ZeroDimension(header.shape));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::MalformedHeader(format!("shape {:?} overflows", header.shape)))?;
    let mut payload = Vec::new();
    let got = source.take(count as u64).read_to_end(&mut payload)?;
    if got != count {
        return Err(StoreError::Truncated {
            section: "payload",
            expected: count as u64,
            got: got as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    TensorDump::new(layer, header.sample_ids, header.shape, data)
}

pub fn save_dump(dump: &TensorDump, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_dump(dump, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<TensorDump> {
    read_dump(&mut BufReader::new(File::open(path)?))
}

/// An `[N, C, H, W]` block of activations in `f64`, the working form of a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    layer: LayerRef,
    sample_ids: Vec<String>,
    shape: [usize; 4],
    data: Vec<f64>,
}

impl ActivationBatch {
    pub fn new(
        layer: LayerRef,
        sample_ids: Vec<String>,
        shape: [usize; 4],
        data: Vec<f64>,
    ) -> Result<Self> {
        layer.validate()?;
        validate_shape(shape, data.len())?;
        validate_ids(&sample_ids, shape[0])?;
        Ok(Self {
            layer,
            sample_ids,
            shape,
            data,
        })
    }

    pub fn layer(&self) -> &LayerRef {
        &self.layer
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `H · W`.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All `C·H·W` values of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// The `H·W` plane of channel `c` in sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// Returns a copy with every value mapped through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Rows of this batch selected (and ordered) by `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let len = self.shape[1] * self.plane_len();
        let mut data = Vec::with_capacity(ids.len() * len);
        for id in ids {
            let &n = index
                .get(id.as_str())
                .ok_or_else(|| StoreError::UnknownSample(id.clone()))?;
            data.extend_from_slice(self.sample(n));
        }
        let mut shape = self.shape;
        shape[0] = ids.len();
        Self::new(self.layer.clone(), ids.to_vec(), shape, data)
    }

    /// Writes the batch back out as an `f32` dump.
    pub fn to_dump(&self) -> Result<TensorDump> {
        TensorDump::new(
            self.layer.clone(),
            self.sample_ids.clone(),
            self.shape,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Selects the rows of `dump` named by `ids`, in the order given.
pub fn slice_batch(dump: &TensorDump, ids: &[String]) -> Result<ActivationBatch> {
    let index: HashMap<&str, usize> = dump
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let len = dump.sample_len();
    let mut data = Vec::with_capacity(ids.len() * len);
    for id in ids {
        let &n = index
            .get(id.as_str())
            .ok_or_else(|| StoreError::UnknownSample(id.clone()))?;
        data.extend(dump.data[n * len..(n + 1) * len].iter().map(|&v| f64::from(v)));
    }
    let mut shape = dump.shape;
    shape[0] = ids.len();
    ActivationBatch::new(dump.layer.clone(), ids.to_vec(), shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub source_path: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_label: Option<String>,
}

/// Dataset manifest, stored as a JSON array of entries (`*.manifest.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.sample_id.is_empty() {
                return Err(StoreError::EmptyField("sample_id"));
            }
            if !seen.insert(e.sample_id.as_str()) {
                return Err(StoreError::DuplicateSample(e.sample_id.clone()));
            }
        }
        Ok(())
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| e.sample_id.clone())
            .collect()
    }

    /// Checks that every sample of `dump` has an entry.
    pub fn covers(&self, dump: &TensorDump) -> Result<()> {
        let known: HashSet<&str> = self.entries.iter().map(|e| e.sample_id.as_str()).collect();
        match dump.sample_ids.iter().find(|id| !known.contains(id.as_str())) {
            Some(id) => Err(StoreError::Manifest(format!(
                "sample {id:?} of {} has no manifest entry",
                dump.layer
            ))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| StoreError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn dump(shape: [usize; 4]) -> TensorDump {
        let len = shape.iter().product();
        TensorDump::new(
            LayerRef::new("m", "l").unwrap(),
            ids(shape[0]),
            shape,
            (0..len).map(|i| i as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn payload_size_is_exact() {
        let d = dump([2, 3, 2, 2]);
        let mut buf = Vec::new();
        let n = write_dump(&d, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        assert_eq!(buf.len() - 16 - header_len, 96);
        assert_eq!(&buf[..4], b"ACTV");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn round_trip_is_identity() {
        let d = dump([2, 3, 2, 2]);
        let mut buf = Vec::new();
        write_dump(&d, &mut buf).unwrap();
        let back = read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        write_dump(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn short_data_is_rejected_before_writing() {
        let err = TensorDump::new(LayerRef::new("m", "l").unwrap(), ids(1), [1, 3, 2, 2], vec![0.0; 10]);
        assert!(matches!(err, Err(StoreError::ShapeMismatch { expected: 12, got: 10, .. })));

        // A dump that bypassed the constructor still must not emit bytes.
        let mut bad = dump([1, 3, 2, 2]);
        bad.data.truncate(10);
        let mut buf = Vec::new();
        assert!(matches!(write_dump(&bad, &mut buf), Err(StoreError::ShapeMismatch { .. })));
        assert!(buf.is_empty());
    }

    #[test]
    fn bad_magic() {
        let mut bytes: &[u8] = b"XXXX\x01\x00\x00\x00";
        assert!(matches!(read_dump(&mut bytes), Err(StoreError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version() {
        let mut buf = Vec::new();
        write_dump(&dump([1, 1, 1, 1]), &mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(read_dump(&mut buf.as_slice()), Err(StoreError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_dump(&dump([2, 3, 2, 2]), &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        match read_dump(&mut buf.as_slice()) {
            Err(StoreError::Truncated { section, expected, got }) => {
                assert_eq!(section, "payload");
                assert_eq!(expected, 96);
                assert_eq!(got, 92);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"ACTV");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let header = br#"{"model_id": 3}"#;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header);
        assert!(matches!(read_dump(&mut buf.as_slice()), Err(StoreError::MalformedHeader(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = TensorDump::new(
            LayerRef::new("m", "l").unwrap(),
            vec!["a".into(), "a".into()],
            [2, 1, 1, 1],
            vec![0.0; 2],
        );
        assert!(matches!(err, Err(StoreError::DuplicateSample(_))));
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = TensorDump::new(LayerRef::new("m", "l").unwrap(), ids(1), [1, 0, 2, 2], vec![]);
        assert!(matches!(err, Err(StoreError::ZeroDimension(_))));
    }

    #[test]
    fn identity_and_reversed_slices() {
        let d = dump([3, 2, 1, 2]);
        let all = slice_batch(&d, d.sample_ids()).unwrap();
        assert_eq!(all, d.to_batch());

        let rev: Vec<String> = d.sample_ids().iter().rev().cloned().collect();
        let b = slice_batch(&d, &rev).unwrap();
        for k in 0..3 {
            assert_eq!(b.sample(k), all.sample(2 - k));
        }
        assert!(matches!(
            slice_batch(&d, &["missing".to_string()]),
            Err(StoreError::UnknownSample(id)) if id == "missing"
        ));
    }

    #[test]
    fn manifest_json_is_an_array() {
        let m = Manifest::new(vec![ManifestEntry {
            sample_id: "s0".into(),
            source_path: "img/0.png".into(),
            role: Role::Test,
            concept_label: Some("head".into()),
        }])
        .unwrap();
        let text = m.to_json();
        assert!(text.trim_start().starts_with('['));
        assert_eq!(Manifest::from_json(&text).unwrap(), m);
        assert_eq!(m.ids_with_role(Role::Test), vec!["s0".to_string()]);
        assert!(m.covers(&dump([1, 1, 1, 1])).is_ok());
        assert!(m.covers(&dump([2, 1, 1, 1])).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let e = ManifestEntry {
            sample_id: "x".into(),
            source_path: "p".into(),
            role: Role::Train,
            concept_label: None,
        };
        assert!(Manifest::new(vec![e.clone(), e]).is_err());
    }
}
