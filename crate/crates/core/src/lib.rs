//! Softmax classifiers under shifted label distributions.
//!
//! The train-set label prior of a distantly supervised corpus rarely matches
//! the prior of its human-annotated test set. This crate provides the pieces
//! needed to study and correct that mismatch for softmax classifiers over
//! sparse features:
//!
//! * [`model`] — label vocabulary, instances, and the softmax classifier
//!   itself (sparse-linear or feature-embedding-average representations).
//! * [`train`] — cross-entropy training against a self-adapted supervision
//!   distribution, SGD with patience-based learning-rate decay, and the
//!   frozen-bias training variant used by BA-Fix.
//! * [`adapt`] — clean-dev splitting, label-prior estimation, bias adjustment
//!   (BA-Set / BA-Fix), and max/entropy rejection thresholds with grid search.
//! * [`synth`] — synthetic label-shift suites: prior interpolation, random
//!   simplex priors, disproportionate stratified sampling, class-conditional
//!   generation, and per-label shift reports.
//! * [`eval`] — micro precision/recall/F1 with NONE handling and multi-seed
//!   aggregation.
//! * [`corpus`] — the JSONL instance format.
//! * [`experiment`] — the end-to-end multi-seed experiment pipeline and its
//!   report files.

pub mod adapt;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use model::{
    Instance, LabelDistribution, LabelVocab, ModelKind, Representation, SoftmaxClassifier,
};

/// Deterministically derives an independent stream seed from a base seed and
/// a stream tag (splitmix64 over the combined value).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
