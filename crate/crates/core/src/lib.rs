//! Concept-based similarity of CNN feature spaces.
//!
//! Everything in this crate operates on exported activation tensors
//! (`.actv` dumps, see [`tensor_store`]). Two measures are provided:
//!
//! * unsupervised concept similarity (UCS): concepts are mined per layer by
//!   non-negative matrix factorization ([`factorizer`]), turned into binary
//!   saliency masks ([`mask`]), and compared by mean IoU ([`similarity`]);
//! * supervised feature space similarity (SFSS): concept activation vectors
//!   are trained per layer ([`cav`]) and the per-sample cosine series of two
//!   layers are correlated ([`similarity`]).
//!
//! [`synth`] fabricates concept training images and planted activation stacks
//! with known ground truth, and [`report`] renders matrices as CSV and SVG.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the default
//! `parallel` feature is enabled and plain iterators otherwise. Reductions use
//! fixed block boundaries, so results are bit-identical for any thread count.

pub mod cav;
pub mod factorizer;
pub mod linalg;
pub mod mask;
pub mod par;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod tensor_store;

pub use cav::{Cav, ConceptDataset, Dimensionality, TrainConfig};
pub use factorizer::{ConceptActivations, FactorizationConfig, NcavSet};
pub use linalg::Matrix;
pub use mask::{BinaryMask, ContinuousMask, ContinuousMaskSet, MaskPipelineConfig, MaskSet};
pub use similarity::{
    ConceptMatching, CorrelationKind, LayerConcepts, SfssMatrix, UcsMatrix,
};
pub use synth::{PlantedStack, PlantedStackSpec, Superpixel, SynthConfig, SynthSample};
pub use tensor_store::{ActivationBatch, LayerRef, Manifest, TensorDump};
