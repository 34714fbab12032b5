//! Stage-one scoring: how consistently a detector predicts an image under
//! augmentation.
//!
//! Each reference prediction (an original-image detection mapped into the
//! augmented frame) is matched to the augmented-image detection with the
//! highest IoU. The pair's consistency `m = c_box + c_score` lies in `[0, 2]`;
//! the image metric is the mean over augmentations of `min_k |m_k - beta|`.
//! Lower metric means more informative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, AugmentationSpec, BoundingBox};
use crate::ImageId;

/// Tolerance on the unit sum of a probability vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BETA: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("score vector is empty or all zero")]
    EmptyScores,
    #[error("confidence {value} at class {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("beta must be in (0, 2), got {0}")]
    InvalidBeta(f64),
}

/// Per-class confidences of one detection, indexed by dataset class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, MetricError> {
        for (index, &value) in scores.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(MetricError::ScoreOutOfRange { index, value });
            }
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the highest confidence, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.0.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// A single detection: a box plus its class confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub bbox: BoundingBox,
    pub scores: ScoreVector,
}

impl PredictionRecord {
    pub fn new(bbox: BoundingBox, scores: ScoreVector) -> Self {
        Self { bbox, scores }
    }
}

/// Drops detections whose top confidence is below `threshold` or zero.
pub fn retain_confident(preds: &[PredictionRecord], threshold: f64) -> Vec<PredictionRecord> {
    preds
        .iter()
        .filter(|p| {
            let top = p.scores.max();
            top > 0.0 && top >= threshold
        })
        .cloned()
        .collect()
}

pub fn normalize(s: &ScoreVector) -> Result<Vec<f64>, MetricError> {
    let total: f64 = s.0.iter().sum();
    if !(total > 0.0) {
        return Err(MetricError::EmptyScores);
    }
    Ok(s.0.iter().map(|v| v / total).collect())
}

fn check_distribution(p: &[f64]) -> Result<(), MetricError> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(MetricError::InvalidDistribution(format!(
            "entry {v} is negative or not finite"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(MetricError::InvalidDistribution(format!(
            "entries sum to {total}, expected 1"
        )));
    }
    Ok(())
}

fn entropy_bits(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
///
/// Evaluated as `H((p + q) / 2) - (H(p) + H(q)) / 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::InvalidDistribution(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    if p == q {
        return Ok(0.0);
    }
    let mixture = entropy_bits(p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)));
    let js = mixture - 0.5 * (entropy_bits(p.iter().copied()) + entropy_bits(q.iter().copied()));
    Ok(js.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index: usize,
    pub iou: f64,
}

/// Candidate with the highest IoU against `ref_box`; lowest index wins ties.
/// `None` when there are no candidates or none overlap.
pub fn match_prediction(ref_box: &BoundingBox, candidates: &[PredictionRecord]) -> Option<Match> {
    let mut best: Option<Match> = None;
    for (index, cand) in candidates.iter().enumerate() {
        let v = iou(ref_box, &cand.bbox);
        if v > 0.0 && best.is_none_or(|b| v > b.iou) {
            best = Some(Match { index, iou: v });
        }
    }
    best
}

/// Box and score consistency of one reference/corresponding pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub c_box: f64,
    pub c_score: f64,
    pub m: f64,
}

impl Consistency {
    pub const UNMATCHED: Consistency = Consistency {
        c_box: 0.0,
        c_score: 0.0,
        m: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyRecord {
    pub reference_index: usize,
    pub corresponding_index: Option<usize>,
    pub consistency: Consistency,
}

/// `c_box` is the IoU; `c_score` weights `1 - JS` of the normalized score
/// vectors by the mean of the two raw maximum confidences.
pub fn pair_consistency(
    reference: &PredictionRecord,
    corresponding: &PredictionRecord,
) -> Result<Consistency, MetricError> {
    let p = normalize(&reference.scores)?;
    let q = normalize(&corresponding.scores)?;
    let js = js_divergence(&p, &q)?;
    let weight = 0.5 * (reference.scores.max() + corresponding.scores.max());
    let c_box = iou(&reference.bbox, &corresponding.bbox);
    let c_score = weight * (1.0 - js);
    Ok(Consistency {
        c_box,
        c_score,
        m: (c_box + c_score).clamp(0.0, 2.0),
    })
}

/// Matches every reference against `predictions` independently; a prediction
/// may serve several references. Unmatched references get `m = 0`.
pub fn consistency_records(
    references: &[PredictionRecord],
    predictions: &[PredictionRecord],
) -> Result<Vec<ConsistencyRecord>, MetricError> {
    references
        .iter()
        .enumerate()
        .map(|(k, reference)| {
            let found = match_prediction(&reference.bbox, predictions);
            let consistency = match found {
                Some(m) => pair_consistency(reference, &predictions[m.index])?,
                None => Consistency::UNMATCHED,
            };
            Ok(ConsistencyRecord {
                reference_index: k,
                corresponding_index: found.map(|m| m.index),
                consistency,
            })
        })
        .collect()
}

/// How the per-reference distances `|m_k - beta|` are pooled within one augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricVariant {
    /// Most informative local region.
    #[default]
    Min,
    /// Whole-image average, kept as an ablation.
    Mean,
}

/// Metric assigned when there are no reference predictions to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyImagePolicy {
    /// `M = beta`, the same distance an unmatched reference contributes.
    #[default]
    Beta,
    /// `M = 0`, i.e. treat the image as maximally informative.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub beta: f64,
    pub variant: MetricVariant,
    pub empty_policy: EmptyImagePolicy,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            variant: MetricVariant::Min,
            empty_policy: EmptyImagePolicy::Beta,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return Err(MetricError::InvalidBeta(self.beta));
        }
        Ok(())
    }

    fn empty_value(&self) -> f64 {
        match self.empty_policy {
            EmptyImagePolicy::Beta => self.beta,
            EmptyImagePolicy::Zero => 0.0,
        }
    }
}

/// Mapped references and detector output for one augmentation of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub augmentation: AugmentationSpec,
    pub references: Vec<PredictionRecord>,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInformation {
    pub image_id: ImageId,
    pub metric: f64,
    /// Pooled distance per augmentation, in input order.
    pub per_augmentation: Vec<(AugmentationSpec, f64)>,
    /// Set when no augmentation had any reference prediction.
    pub no_references: bool,
}

// Summing in sorted order keeps the result independent of input order.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // rounding can push the mean of equal values one ulp past them
    mean.clamp(values[0], values[values.len() - 1])
}

/// Distance of one augmentation's references to `beta`, pooled by `variant`.
pub fn augmentation_distance(view: &AugmentedView, config: &ScoringConfig) -> Result<f64, MetricError> {
    if view.references.is_empty() {
        return Ok(config.empty_value());
    }
    let mut distances: Vec<f64> = consistency_records(&view.references, &view.predictions)?
        .iter()
        .map(|r| (r.consistency.m - config.beta).abs())
        .collect();
    Ok(match config.variant {
        MetricVariant::Min => distances.iter().copied().fold(f64::INFINITY, f64::min),
        MetricVariant::Mean => order_free_mean(&mut distances),
    })
}

/// Per-image metric: mean over augmentations of the pooled distance.
/// An image without augmentations or without any reference prediction gets
/// the empty-image policy value and is flagged.
pub fn image_information(
    image_id: ImageId,
    views: &[AugmentedView],
    config: &ScoringConfig,
) -> Result<ImageInformation, MetricError> {
    config.validate()?;
    let no_references = views.iter().all(|v| v.references.is_empty());
    let per_augmentation = views
        .iter()
        .map(|v| Ok((v.augmentation, augmentation_distance(v, config)?)))
        .collect::<Result<Vec<_>, MetricError>>()?;
    let metric = if no_references {
        config.empty_value()
    } else {
        let mut values: Vec<f64> = per_augmentation.iter().map(|(_, d)| *d).collect();
        order_free_mean(&mut values)
    };
    Ok(ImageInformation {
        image_id,
        metric,
        per_augmentation,
        no_references,
    })
}

/// [`image_information`] with the mean-over-references ablation forced on.
pub fn image_information_mean(
    image_id: ImageId,
    views: &[AugmentedView],
    config: &ScoringConfig,
) -> Result<ImageInformation, MetricError> {
    let config = ScoringConfig {
        variant: MetricVariant::Mean,
        ..*config
    };
    image_information(image_id, views, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_of_equal_values_is_exact() {
        let x = 1.677333425552764;
        assert_ne!((x + x + x) / 3.0, x);
        assert_eq!(order_free_mean(&mut [x, x, x]), x);
        assert_eq!(order_free_mean(&mut [3.0, 1.0, 2.0]), 2.0);
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn pred(b: BoundingBox, s: &[f64]) -> PredictionRecord {
        PredictionRecord::new(b, ScoreVector::new(s.to_vec()).unwrap())
    }

    /// Direct base-2 summation of the two KL terms against the midpoint.
    fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
        let kl = |a: &[f64], m: &[f64]| {
            a.iter()
                .zip(m)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| x * (x / y).log2())
                .sum::<f64>()
        };
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        0.5 * kl(p, &m) + 0.5 * kl(q, &m)
    }

    fn id(s: &str) -> ImageId {
        ImageId::from(s)
    }

    #[test]
    fn normalize_examples() {
        let n = |v: &[f64]| normalize(&ScoreVector::new(v.to_vec()).unwrap()).unwrap();
        assert_eq!(n(&[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(n(&[0.8, 0.2]), vec![0.8, 0.2]);
        let r = n(&[0.6, 0.2]);
        assert!((r[0] - 0.75).abs() < 1e-12 && (r[1] - 0.25).abs() < 1e-12);
        assert_eq!(
            normalize(&ScoreVector::new(vec![0.0, 0.0]).unwrap()),
            Err(MetricError::EmptyScores)
        );
        assert!(ScoreVector::new(vec![1.2]).is_err());
    }

    #[test]
    fn js_examples_against_summation_oracle() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(js_oracle(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        let oracle = js_oracle(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((oracle - 0.3113).abs() < 1e-4);
        assert!((js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn js_rejects_bad_inputs() {
        assert!(matches!(
            js_divergence(&[1.0], &[0.5, 0.5]),
            Err(MetricError::InvalidDistribution(_))
        ));
        assert!(js_divergence(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn match_examples() {
        let r = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_prediction(&r, &[]), None);
        assert_eq!(
            match_prediction(&r, &[pred(r, &[1.0])]),
            Some(Match { index: 0, iou: 1.0 })
        );
        let cands = [pred(r, &[1.0]), pred(bx(5.0, 5.0, 15.0, 15.0), &[1.0])];
        assert_eq!(match_prediction(&r, &cands), Some(Match { index: 0, iou: 1.0 }));
        // all-disjoint candidates count as no match
        assert_eq!(match_prediction(&r, &[pred(bx(20.0, 20.0, 30.0, 30.0), &[1.0])]), None);
        // equal IoU: first wins
        let tie = [pred(bx(5.0, 0.0, 15.0, 10.0), &[1.0]), pred(bx(-5.0, 0.0, 5.0, 10.0), &[1.0])];
        assert_eq!(match_prediction(&r, &tie).unwrap().index, 0);
    }

    #[test]
    fn pair_consistency_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let top = pair_consistency(&pred(b, &[1.0, 0.0]), &pred(b, &[1.0, 0.0])).unwrap();
        assert_eq!(top, Consistency { c_box: 1.0, c_score: 1.0, m: 2.0 });
        let bottom = pair_consistency(
            &pred(b, &[1.0, 0.0]),
            &pred(bx(20.0, 20.0, 30.0, 30.0), &[0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(bottom.c_box, 0.0);
        assert!(bottom.c_score.abs() < 1e-12 && bottom.m.abs() < 1e-12);
        let soft = pair_consistency(&pred(b, &[0.9, 0.1]), &pred(b, &[0.9, 0.1])).unwrap();
        assert!((soft.m - 1.9).abs() < 1e-12);
    }

    #[test]
    fn unmatched_reference_scores_zero() {
        let recs = consistency_records(&[pred(bx(0.0, 0.0, 1.0, 1.0), &[1.0])], &[]).unwrap();
        assert_eq!(recs[0].corresponding_index, None);
        assert_eq!(recs[0].consistency, Consistency::UNMATCHED);
    }

    /// A reference/corresponding pair whose consistency is exactly `m`:
    /// for `m > 1` identical boxes with one-hot confidence `m - 1`, otherwise
    /// disjoint one-hot scores and a widened box with IoU `m`.
    fn pair_with_m(slot: usize, m: f64) -> (PredictionRecord, PredictionRecord) {
        let x = 100.0 * slot as f64;
        let b = bx(x, 0.0, x + 10.0, 10.0);
        if m > 1.0 {
            (pred(b, &[m - 1.0, 0.0]), pred(b, &[m - 1.0, 0.0]))
        } else {
            (pred(b, &[1.0, 0.0]), pred(bx(x, 0.0, x + 10.0 / m, 10.0), &[0.0, 1.0]))
        }
    }

    fn view_with_m(values: &[f64]) -> AugmentedView {
        let (references, predictions) = values
            .iter()
            .enumerate()
            .map(|(i, m)| pair_with_m(i, *m))
            .unzip();
        AugmentedView {
            augmentation: AugmentationSpec::HorizontalFlip,
            references,
            predictions,
        }
    }

    #[test]
    fn pair_helper_hits_requested_m() {
        for m in [0.2, 0.3, 0.75, 1.3, 1.9] {
            let (r, c) = pair_with_m(1, m);
            assert!((pair_consistency(&r, &c).unwrap().m - m).abs() < 1e-12);
        }
    }

    #[test]
    fn image_information_examples() {
        let cfg = ScoringConfig::default();
        let info = image_information(id("a"), &[view_with_m(&[1.3, 0.2])], &cfg).unwrap();
        assert!(info.metric.abs() < 1e-12);

        let two = [view_with_m(&[1.2]), view_with_m(&[1.6])];
        let info = image_information(id("b"), &two, &cfg).unwrap();
        assert!((info.metric - 0.2).abs() < 1e-12);
        assert_eq!(info.per_augmentation.len(), 2);
    }

    #[test]
    fn mean_variant_examples() {
        let cfg = ScoringConfig::default();
        let single = [view_with_m(&[1.7]), view_with_m(&[1.1])];
        assert_eq!(
            image_information(id("s"), &single, &cfg).unwrap().metric,
            image_information_mean(id("s"), &single, &cfg).unwrap().metric
        );
        let v = [view_with_m(&[1.3, 0.3])];
        let min = image_information(id("x"), &v, &cfg).unwrap().metric;
        let mean = image_information_mean(id("x"), &v, &cfg).unwrap().metric;
        assert!(min.abs() < 1e-12);
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_images_follow_policy() {
        let empty = AugmentedView {
            augmentation: AugmentationSpec::HorizontalFlip,
            references: vec![],
            predictions: vec![pred(bx(0.0, 0.0, 1.0, 1.0), &[1.0])],
        };
        let cfg = ScoringConfig::default();
        let info = image_information(id("e"), &[empty.clone()], &cfg).unwrap();
        assert!(info.no_references);
        assert_eq!(info.metric, 1.3);
        let zero = ScoringConfig {
            empty_policy: EmptyImagePolicy::Zero,
            ..cfg
        };
        assert_eq!(image_information(id("e"), &[empty.clone()], &zero).unwrap().metric, 0.0);
        assert_eq!(image_information_mean(id("e"), &[empty], &cfg).unwrap().metric, 1.3);
        assert!(image_information(id("e"), &[], &cfg).unwrap().no_references);
    }

    #[test]
    fn beta_bounds_are_checked() {
        for beta in [0.0, 2.0, 2.5, f64::NAN] {
            let cfg = ScoringConfig { beta, ..Default::default() };
            assert!(image_information(id("a"), &[], &cfg).is_err());
        }
    }

    #[test]
    fn identity_augmentation_with_full_confidence_gives_upper_bound() {
        let refs: Vec<_> = (0..4)
            .map(|i| {
                let x = 12.0 * i as f64;
                let mut s = vec![0.0; 4];
                s[i] = 1.0;
                pred(bx(x, 0.0, x + 10.0, 10.0), &s)
            })
            .collect();
        let recs = consistency_records(&refs, &refs).unwrap();
        assert!(recs.iter().all(|r| r.consistency.m == 2.0));
        let view = AugmentedView {
            augmentation: AugmentationSpec::Original,
            references: refs.clone(),
            predictions: refs,
        };
        let cfg = ScoringConfig::default();
        let d = augmentation_distance(&view, &cfg).unwrap();
        assert_eq!(d, (2.0f64 - 1.3).abs());
    }

    fn arb_dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..1.0f64, n).prop_filter_map("nonzero", |v| {
            let t: f64 = v.iter().sum();
            (t > 1e-3).then(|| v.iter().map(|x| x / t).collect())
        })
    }

    fn arb_pred() -> impl Strategy<Value = PredictionRecord> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, prop::collection::vec(0.0..=1.0f64, 3))
            .prop_filter("nonzero scores", |t| t.4.iter().any(|v| *v > 0.0))
            .prop_map(|(x, y, w, h, s)| pred(bx(x, y, x + w, y + h), &s))
    }

    proptest! {
        #[test]
        fn js_symmetric(p in arb_dist(5), q in arb_dist(5)) {
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn m_and_metric_bounded(
            refs in prop::collection::vec(arb_pred(), 0..5),
            cands in prop::collection::vec(arb_pred(), 0..5),
            beta in 0.05..1.95f64,
        ) {
            for r in consistency_records(&refs, &cands).unwrap() {
                prop_assert!((0.0..=2.0).contains(&r.consistency.m));
            }
            let cfg = ScoringConfig { beta, ..Default::default() };
            let view = AugmentedView { augmentation: AugmentationSpec::HorizontalFlip, references: refs, predictions: cands };
            let m = image_information(id("p"), &[view], &cfg).unwrap().metric;
            prop_assert!(m >= 0.0 && m <= beta.max(2.0 - beta) + 1e-12);
        }

        #[test]
        fn match_is_exhaustive_argmax(r in arb_pred(), cands in prop::collection::vec(arb_pred(), 0..8)) {
            let ious: Vec<f64> = cands.iter().map(|c| iou(&r.bbox, &c.bbox)).collect();
            let mut expect = None;
            for (i, v) in ious.iter().enumerate() {
                if *v > 0.0 && expect.is_none_or(|(_, b)| *v > b) {
                    expect = Some((i, *v));
                }
            }
            let got = match_prediction(&r.bbox, &cands).map(|m| (m.index, m.iou));
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn image_information_is_permutation_invariant(
            refs in prop::collection::vec(arb_pred(), 1..5),
            cands in prop::collection::vec(arb_pred(), 0..5),
            cands2 in prop::collection::vec(arb_pred(), 0..5),
            variant in prop_oneof![Just(MetricVariant::Min), Just(MetricVariant::Mean)],
            rot in 0usize..5,
        ) {
            let cfg = ScoringConfig { variant, ..Default::default() };
            let mk = |refs: Vec<PredictionRecord>, c: &Vec<PredictionRecord>, aug| AugmentedView {
                augmentation: aug, references: refs, predictions: c.clone(),
            };
            let views = vec![
                mk(refs.clone(), &cands, AugmentationSpec::HorizontalFlip),
                mk(refs.clone(), &cands2, AugmentationSpec::Original),
            ];
            let mut rotated = refs.clone();
            rotated.rotate_left(rot % refs.len());
            let shuffled = vec![
                mk(rotated.clone(), &cands2, AugmentationSpec::Original),
                mk(rotated, &cands, AugmentationSpec::HorizontalFlip),
            ];
            let a = image_information(id("q"), &views, &cfg).unwrap().metric;
            let b = image_information(id("q"), &shuffled, &cfg).unwrap().metric;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn common_confidence_scale_only_changes_weight(
            s1 in prop::collection::vec(0.01..=1.0f64, 3),
            s2 in prop::collection::vec(0.01..=1.0f64, 3),
            c in 0.01..=1.0f64,
        ) {
            let b = bx(0.0, 0.0, 10.0, 10.0);
            let base = pair_consistency(&pred(b, &s1), &pred(b, &s2)).unwrap();
            let scale = |v: &Vec<f64>| v.iter().map(|x| x * c).collect::<Vec<_>>();
            let scaled = pair_consistency(&pred(b, &scale(&s1)), &pred(b, &scale(&s2))).unwrap();
            let w = 0.5 * (s1.iter().cloned().fold(0.0, f64::max) + s2.iter().cloned().fold(0.0, f64::max));
            let one_minus_js = base.c_score / w;
            let scaled_one_minus_js = scaled.c_score / (c * w);
            prop_assert!((one_minus_js - scaled_one_minus_js).abs() < 1e-9);
        }
    }
}
