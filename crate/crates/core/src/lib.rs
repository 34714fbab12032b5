//! Two-stage active-learning sample selection for object detectors.
//!
//! Stage one ranks unlabeled images by how consistently the detector predicts
//! them under augmentation ([`consistency`]). Stage two trims the expanded
//! stage-one pool toward class balance by comparing each image's predicted
//! class distribution with the labeled pool's ([`distribution`]).
//! [`pipeline`] runs whole cycles, [`io`] is the file boundary and [`sim`] is a
//! seeded synthetic world for end-to-end checks.

pub mod consistency;
pub mod distribution;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod sim;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use consistency::{
    image_information, image_information_mean, js_divergence, match_prediction, normalize,
    pair_consistency, AugmentedView, ImageInformation, MetricVariant, PredictionRecord,
    ScoreVector, ScoringConfig,
};
pub use distribution::{
    labeled_pool_distribution, mutual_information, select_by_mutual_information,
    unlabeled_image_distribution, ClassDistribution, LabelCounts,
};
pub use geometry::{iou, map_box, map_predictions, AugmentationSpec, BoundingBox, ImageSize};
pub use pipeline::{PoolState, SelectionConfig};

/// Dataset-wide image identifier. Orders lexicographically; every tie-break
/// in the engine falls back to this order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ImageId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
