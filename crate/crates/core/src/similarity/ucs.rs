//! Unsupervised concept similarity: mean per-sample IoU of two concepts' masks.

use serde::{Deserialize, Serialize};

use super::{Result, SimilarityError};
use crate::mask::{iou, BinaryMask, ContinuousMaskSet, MaskError, MaskSet, Overlap};
use crate::par;
use crate::tensor_store::LayerRef;

/// One UCS value. Samples where both masks are empty are left out of the
/// mean; when every sample is left out the value is 0 and `degenerate` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcsScore {
    pub value: f64,
    pub excluded: usize,
    pub degenerate: bool,
}

pub fn ucs(masks_i: &[BinaryMask], masks_j: &[BinaryMask]) -> Result<UcsScore> {
    if masks_i.len() != masks_j.len() {
        return Err(SimilarityError::LengthMismatch(masks_i.len(), masks_j.len()));
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    for (a, b) in masks_i.iter().zip(masks_j) {
        match iou(a, b)? {
            Overlap::Value(v) => {
                sum += v;
                included += 1;
            }
            Overlap::BothEmpty => {}
        }
    }
    let excluded = masks_i.len() - included;
    if included == 0 {
        return Ok(UcsScore {
            value: 0.0,
            excluded,
            degenerate: true,
        });
    }
    Ok(UcsScore {
        value: sum / included as f64,
        excluded,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRef {
    pub layer: LayerRef,
    pub ncav_id: String,
    pub index: usize,
}

impl std::fmt::Display for ConceptRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:c{}", self.layer, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcsMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    excluded: Vec<usize>,
    pub row_concepts: Vec<ConceptRef>,
    pub col_concepts: Vec<ConceptRef>,
    pub n_samples: usize,
}

impl UcsMatrix {
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

    /// Both-empty sample count for cell `(r, c)`.
    pub fn excluded(&self, r: usize, c: usize) -> usize {
        self.excluded[r * self.cols + c]
    }

    pub fn excluded_counts(&self) -> &[usize] {
        &self.excluded
    }

    /// Cells where every sample was excluded.
    pub fn fully_excluded_cells(&self) -> usize {
        self.excluded.iter().filter(|&&e| e == self.n_samples).count()
    }

    pub fn transpose(&self) -> UcsMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        let mut excluded = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
                excluded.push(self.excluded(r, c));
            }
        }
        UcsMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
            excluded,
            row_concepts: self.col_concepts.clone(),
            col_concepts: self.row_concepts.clone(),
            n_samples: self.n_samples,
        }
    }

    /// Reorders columns, e.g. into a matching's diagonal order.
    pub fn permute_columns(&self, order: &[usize]) -> UcsMatrix {
        assert_eq!(order.len(), self.cols);
        let mut values = Vec::with_capacity(self.values.len());
        let mut excluded = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for &c in order {
                values.push(self.get(r, c));
                excluded.push(self.excluded(r, c));
            }
        }
        UcsMatrix {
            values,
            excluded,
            col_concepts: order.iter().map(|&c| self.col_concepts[c].clone()).collect(),
            ..self.clone()
        }
    }
}

fn concept_refs(set: &MaskSet) -> Vec<ConceptRef> {
    (0..set.n_concepts)
        .map(|index| ConceptRef {
            layer: set.source.clone(),
            ncav_id: set.ncav_id.clone(),
            index,
        })
        .collect()
}

fn check_alignment(a_ids: &[String], b_ids: &[String]) -> Result<()> {
    if a_ids != b_ids {
        let first = a_ids
            .iter()
            .zip(b_ids)
            .position(|(x, y)| x != y)
            .unwrap_or(a_ids.len().min(b_ids.len()));
        return Err(SimilarityError::SampleMismatch(format!(
            "{} vs {} samples, first difference at position {first}",
            a_ids.len(),
            b_ids.len()
        )));
    }
    Ok(())
}

/// Entry `(i, j)` is the UCS of concept `i` of `a` against concept `j` of `b`.
pub fn ucs_matrix(a: &MaskSet, b: &MaskSet) -> Result<UcsMatrix> {
    check_alignment(&a.sample_ids, &b.sample_ids)?;
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MaskError::Resolution(a.width, a.height, b.width, b.height).into());
    }
    let (rows, cols) = (a.n_concepts, b.n_concepts);
    let cells = par::map_indexed(rows * cols, |i| ucs(a.concept(i / cols), b.concept(i % cols)));
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(UcsMatrix {
        rows,
        cols,
        values: cells.iter().map(|s| s.value).collect(),
        excluded: cells.iter().map(|s| s.excluded).collect(),
        row_concepts: concept_refs(a),
        col_concepts: concept_refs(b),
        n_samples: a.n_samples(),
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub threshold: f64,
    pub matrix: UcsMatrix,
    /// Set pixels per concept of `a`, summed over samples.
    pub true_pixels_a: Vec<usize>,
    pub true_pixels_b: Vec<usize>,
}

/// Rebinarizes the same continuous masks at each threshold and recomputes UCS.
///
/// Thresholds must be finite, non-negative and ascending. Values above 1 are
/// accepted and yield empty masks.
pub fn bt_sweep(
    a: &ContinuousMaskSet,
    b: &ContinuousMaskSet,
    thresholds: &[f64],
) -> Result<Vec<SweepPoint>> {
    if thresholds.is_empty() {
        return Err(SimilarityError::InvalidThreshold("no thresholds given".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(SimilarityError::InvalidThreshold(format!("{t} is not a finite non-negative value")));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimilarityError::InvalidThreshold("thresholds must be ascending".into()));
    }
    check_alignment(&a.sample_ids, &b.sample_ids)?;
    thresholds
        .iter()
        .map(|&t| {
            let (ma, mb) = (a.binarize(t), b.binarize(t));
            Ok(SweepPoint {
                threshold: t,
                matrix: ucs_matrix(&ma, &mb)?,
                true_pixels_a: ma.true_pixels(),
                true_pixels_b: mb.true_pixels(),
            })
        })
        .collect()
}
