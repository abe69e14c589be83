//! Supervised feature space similarity: for two layers, the mean over shared
//! concepts of the correlation between their CAV cosine series.

use serde::{Deserialize, Serialize};

use super::correlation::CorrelationKind;
use super::{Result, SimilarityError};
use crate::cav::{cs_series_many, Cav};
use crate::par;
use crate::tensor_store::{ActivationBatch, LayerRef};

/// One layer's trained CAVs together with its test activations.
#[derive(Debug, Clone)]
pub struct LayerConcepts {
    pub layer: LayerRef,
    pub cavs: Vec<Cav>,
    pub test: ActivationBatch,
}

/// Cosine series of every CAV of a layer, keyed by sorted concept label.
#[derive(Debug, Clone)]
pub struct LayerSeries {
    pub layer: LayerRef,
    pub labels: Vec<String>,
    pub series: Vec<Vec<f64>>,
    pub sample_ids: Vec<String>,
    /// Zero-norm test samples, counted over all CAVs.
    pub degenerate_samples: usize,
}

impl LayerSeries {
    pub fn compute(layer: &LayerConcepts) -> Result<Self> {
        let mut cavs: Vec<&Cav> = layer.cavs.iter().collect();
        cavs.sort_by(|a, b| a.concept_label.cmp(&b.concept_label));
        let labels: Vec<String> = cavs.iter().map(|c| c.concept_label.clone()).collect();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimilarityError::ConceptMismatch(labels.clone(), Vec::new()));
        }
        let computed = cs_series_many(&cavs, &layer.test)?;
        let degenerate_samples = computed.iter().map(|s| s.degenerate.len()).sum();
        let series = computed.into_iter().map(|s| s.values).collect();
        Ok(Self {
            layer: layer.layer.clone(),
            labels,
            series,
            sample_ids: layer.test.sample_ids().to_vec(),
            degenerate_samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfssScore {
    pub value: f64,
    pub n_concepts: usize,
    /// Concepts whose correlation was undefined (constant series), scored 0.
    pub degenerate_concepts: usize,
}

pub fn sfss_from_series(u: &LayerSeries, v: &LayerSeries, kind: CorrelationKind) -> Result<SfssScore> {
    if u.labels != v.labels {
        return Err(SimilarityError::ConceptMismatch(u.labels.clone(), v.labels.clone()));
    }
    if u.sample_ids != v.sample_ids {
        return Err(SimilarityError::SampleMismatch(format!(
            "{} and {} test sets differ",
            u.layer, v.layer
        )));
    }
    if u.labels.is_empty() {
        return Err(SimilarityError::ConceptMismatch(Vec::new(), Vec::new()));
    }
    let mut sum = 0.0;
    let mut degenerate_concepts = 0;
    for (x, y) in u.series.iter().zip(&v.series) {
        let c = kind.apply(x, y)?;
        if c.degenerate {
            degenerate_concepts += 1;
        }
        sum += c.value;
    }
    let m = u.labels.len();
    Ok(SfssScore {
        value: (sum / m as f64).clamp(-1.0, 1.0),
        n_concepts: m,
        degenerate_concepts,
    })
}

pub fn sfss(u: &LayerConcepts, v: &LayerConcepts, kind: CorrelationKind) -> Result<SfssScore> {
    sfss_from_series(&LayerSeries::compute(u)?, &LayerSeries::compute(v)?, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfssMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    degenerate: Vec<usize>,
    pub row_layers: Vec<LayerRef>,
    pub col_layers: Vec<LayerRef>,
    pub concept_labels: Vec<String>,
    pub n_samples: usize,
    pub correlation_kind: CorrelationKind,
}

impl SfssMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Degenerate-concept count for cell `(r, c)`.
    pub fn degenerate(&self, r: usize, c: usize) -> usize {
        self.degenerate[r * self.cols + c]
    }

    pub fn degenerate_counts(&self) -> &[usize] {
        &self.degenerate
    }

    pub fn transpose(&self) -> SfssMatrix {
        let idx = |r: usize, c: usize| r * self.cols + c;
        let mut values = Vec::with_capacity(self.values.len());
        let mut degenerate = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.values[idx(r, c)]);
                degenerate.push(self.degenerate[idx(r, c)]);
            }
        }
        SfssMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
            degenerate,
            row_layers: self.col_layers.clone(),
            col_layers: self.row_layers.clone(),
            ..self.clone()
        }
    }

    /// Mean of the diagonal and of the off-diagonal entries (square matrices).
    pub fn diagonal_contrast(&self) -> (f64, f64) {
        let n = self.rows.min(self.cols);
        let diag: f64 = (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64;
        let off: Vec<f64> = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|(r, c)| r != c)
            .map(|(r, c)| self.get(r, c))
            .collect();
        let off_mean = if off.is_empty() {
            f64::NAN
        } else {
            off.iter().sum::<f64>() / off.len() as f64
        };
        (diag, off_mean)
    }
}

pub fn sfss_matrix(
    layers_a: &[LayerConcepts],
    layers_b: &[LayerConcepts],
    kind: CorrelationKind,
) -> Result<SfssMatrix> {
    let series = |layers: &[LayerConcepts]| {
        par::map_indexed(layers.len(), |i| LayerSeries::compute(&layers[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()
    };
    let sa = series(layers_a)?;
    let sb = series(layers_b)?;
    sfss_matrix_from_series(&sa, &sb, kind)
}

pub fn sfss_matrix_from_series(
    sa: &[LayerSeries],
    sb: &[LayerSeries],
    kind: CorrelationKind,
) -> Result<SfssMatrix> {
    let (rows, cols) = (sa.len(), sb.len());
    let cells = par::map_indexed(rows * cols, |i| sfss_from_series(&sa[i / cols], &sb[i % cols], kind));
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let first = sa.first().or(sb.first());
    Ok(SfssMatrix {
        rows,
        cols,
        values: cells.iter().map(|c| c.value).collect(),
        degenerate: cells.iter().map(|c| c.degenerate_concepts).collect(),
        row_layers: sa.iter().map(|s| s.layer.clone()).collect(),
        col_layers: sb.iter().map(|s| s.layer.clone()).collect(),
        concept_labels: first.map(|s| s.labels.clone()).unwrap_or_default(),
        n_samples: first.map_or(0, |s| s.sample_ids.len()),
        correlation_kind: kind,
    })
}
