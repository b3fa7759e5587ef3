//! Image similarity, lesion-wise segmentation scores, and the statistics
//! used to aggregate them.
//!
//! Similarity metrics expect images already remapped to `[0, 1]`
//! ([`crate::data::to_unit_range`]); [`SimilarityReport::compute`] does the
//! remapping from the network range.

mod lesion;
mod similarity;
mod stats;

pub use lesion::{
    connected_components, lesion_scores, match_lesions, pixel_dice, Component, LesionMatchResult, MatchPolicy,
    SegScores,
};
pub use similarity::{ccoeff, mae, msd, ssim, SimilarityReport, SSIM_WINDOW};
pub use stats::{crossval_aggregate, mean, paired_ttest, Band, CrossValSummary, TTest};
