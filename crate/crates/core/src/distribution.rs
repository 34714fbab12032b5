//! Stage-two class balancing.
//!
//! The labeled pool and each candidate image are summarized as probability
//! vectors over the dataset classes. Candidates whose distribution diverges
//! most from the labeled pool are kept.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{js_divergence, MetricError, PredictionRecord};
use crate::ImageId;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("labeled pool has no objects")]
    EmptyPool,
    #[error("expected {expected} classes, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    NotNormalized(String),
    #[error("budget {budget} exceeds the {available} available candidates")]
    InsufficientCandidates { budget: usize, available: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Object instances per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelCounts(Vec<u64>);

impl LabelCounts {
    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![0; num_classes])
    }

    pub fn new(counts: Vec<u64>) -> Self {
        Self(counts)
    }

    /// Counts class ids; ids past `num_classes` are rejected.
    pub fn from_class_ids(
        num_classes: usize,
        ids: impl IntoIterator<Item = usize>,
    ) -> Result<Self, DistributionError> {
        let mut counts = Self::zeros(num_classes);
        for id in ids {
            if id >= num_classes {
                return Err(DistributionError::ClassCountMismatch {
                    expected: num_classes,
                    got: id + 1,
                });
            }
            counts.0[id] += 1;
        }
        Ok(counts)
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn add(&mut self, other: &LabelCounts) -> Result<(), DistributionError> {
        if other.0.len() != self.0.len() {
            return Err(DistributionError::ClassCountMismatch {
                expected: self.0.len(),
                got: other.0.len(),
            });
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DistributionError::NotNormalized(format!("{probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistributionError::NotNormalized(format!("sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    /// Count-proportional distribution; `None` when all counts are zero.
    pub fn proportional(counts: &LabelCounts) -> Option<Self> {
        let total = counts.total();
        (total > 0).then(|| Self(counts.0.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// Max-shifted softmax.
pub fn softmax(values: &[f64]) -> ClassDistribution {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    ClassDistribution(exps.into_iter().map(|e| e / total).collect())
}

/// How labeled-pool counts enter the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Softmax of the raw instance counts.
    #[default]
    RawCounts,
    /// Counts divided by their total first; avoids saturation on large pools.
    NormalizedCounts,
}

pub fn labeled_pool_distribution(
    counts: &LabelCounts,
    mode: CountMode,
) -> Result<ClassDistribution, DistributionError> {
    let total = counts.total();
    if total == 0 {
        return Err(DistributionError::EmptyPool);
    }
    let values: Vec<f64> = match mode {
        CountMode::RawCounts => counts.0.iter().map(|&c| c as f64).collect(),
        CountMode::NormalizedCounts => counts.0.iter().map(|&c| c as f64 / total as f64).collect(),
    };
    Ok(softmax(&values))
}

/// Softmax of per-class maxima: the highest original-image confidence plus the
/// highest confidence over all augmented-image predictions pooled together.
pub fn unlabeled_image_distribution<'a>(
    num_classes: usize,
    original: &[PredictionRecord],
    augmented: impl IntoIterator<Item = &'a [PredictionRecord]>,
) -> Result<ClassDistribution, DistributionError> {
    let class_maxima = |preds: &mut dyn Iterator<Item = &PredictionRecord>| {
        let mut best = vec![0.0f64; num_classes];
        for p in preds {
            let s = p.scores.as_slice();
            if s.len() != num_classes {
                return Err(DistributionError::ClassCountMismatch {
                    expected: num_classes,
                    got: s.len(),
                });
            }
            for (b, v) in best.iter_mut().zip(s) {
                *b = b.max(*v);
            }
        }
        Ok(best)
    };
    let orig = class_maxima(&mut original.iter())?;
    let aug = class_maxima(&mut augmented.into_iter().flatten())?;
    let delta: Vec<f64> = orig.iter().zip(&aug).map(|(a, b)| a + b).collect();
    Ok(softmax(&delta))
}

/// JS divergence between an image's class distribution and the labeled pool's.
pub fn mutual_information(
    image: &ClassDistribution,
    pool: &ClassDistribution,
) -> Result<f64, DistributionError> {
    Ok(js_divergence(&image.0, &pool.0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutualScore {
    pub image_id: ImageId,
    pub js: f64,
}

/// Greedy stage-two selection. The labeled distribution is fixed for the
/// whole loop, so repeatedly taking the arg-max equals one stable sort by
/// divergence descending, ties by image id ascending.
pub fn select_by_mutual_information(
    candidates: &[(ImageId, ClassDistribution)],
    pool: &ClassDistribution,
    budget: usize,
) -> Result<Vec<MutualScore>, DistributionError> {
    if budget > candidates.len() {
        return Err(DistributionError::InsufficientCandidates {
            budget,
            available: candidates.len(),
        });
    }
    let mut scored = candidates
        .iter()
        .map(|(id, dist)| {
            Ok(MutualScore {
                image_id: id.clone(),
                js: mutual_information(dist, pool)?,
            })
        })
        .collect::<Result<Vec<_>, DistributionError>>()?;
    scored.sort_by(|a, b| match b.js.total_cmp(&a.js) {
        Ordering::Equal => a.image_id.cmp(&b.image_id),
        o => o,
    });
    scored.truncate(budget);
    Ok(scored)
}
