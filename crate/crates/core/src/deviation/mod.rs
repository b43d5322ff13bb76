//! Representation deviations between clean and adversarial inputs.
//!
//! For every image and checkpoint the flattened activation vectors of the
//! clean and attacked input are compared, and the distance is divided by the
//! mean pairwise distance of clean representations at that checkpoint.

mod distance;
mod kde;
mod normalize;
mod representation;
mod summary;
mod table;

pub use distance::{distance, l2_norm, Metric, NEAR_ZERO_NORM};
pub use kde::{density_at, kde, linspace, sample_std, scott_factor, Kde, DEFAULT_GRID_POINTS};
pub use normalize::{normalization_constants, pair_count, CheckpointConstant, NormalizationConstants, MIN_CONSTANT};
pub use representation::{extract_representations, CheckpointMatrix, RepresentationSet};
pub use summary::{summarize, DistributionSummary};
pub use table::{compute_deviations, DeviationRow, DeviationTable};
