//! Similarity measures between concept sets and between layers.
//!
//! * [`ucs`]: mean IoU of concept masks over a test set, per concept pair.
//! * [`sfss`]: mean correlation of CAV cosine series, per layer pair.
//! * [`matching`]: one-to-one concept assignment for diagonal arrangement.

pub mod correlation;
pub mod matching;
pub mod sfss;
pub mod ucs;

use thiserror::Error;

use crate::cav::CavError;
use crate::mask::MaskError;

pub use correlation::{pearson, spearman, Correlation, CorrelationKind};
pub use matching::{match_concepts, ConceptMatching};
pub use sfss::{sfss, sfss_matrix, LayerConcepts, SfssMatrix, SfssScore};
pub use ucs::{bt_sweep, ucs, ucs_matrix, ConceptRef, SweepPoint, UcsMatrix, UcsScore};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least 2 observations are required, got {0}")]
    TooShort(usize),
    #[error("sample misalignment: {0}")]
    SampleMismatch(String),
    #[error("concept label mismatch: {0:?} vs {1:?}")]
    ConceptMismatch(Vec<String>, Vec<String>),
    #[error("invalid threshold list: {0}")]
    InvalidThreshold(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Cav(#[from] CavError),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;
