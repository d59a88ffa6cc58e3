//! Set-prediction detection criterion with IoU-aware classification,
//! mixed one-to-one / many-to-one Hungarian matching and prime sample
//! weighting, together with baseline losses, misalignment diagnostics and a
//! toy direct set prediction trainer.

pub mod criterion;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod matching;
pub mod scene;
pub mod toytrain;

pub use criterion::{
    prime_weights, quality, total_loss, CriterionConfig, LossReport, Variant, WeightingRow,
};
pub use error::{Error, Result};
pub use geometry::{giou, iou, BBox, CornerBox};
pub use matching::{
    brute_force_match, cost_matrix, hungarian, match_many_to_one, match_many_to_one_with,
    match_one_to_one, Assignment, CostMatrix, CostParams,
};
pub use scene::{GtObject, Prediction, PredictionSet, Scene};
