//! Active-learning cycles: score the unlabeled pool, take an expanded
//! stage-one pool by ascending metric, trim it to budget by class divergence,
//! label the result and move it into the labeled pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{
    image_information, retain_confident, AugmentedView, EmptyImagePolicy, ImageInformation,
    MetricError, MetricVariant, PredictionRecord, ScoringConfig, DEFAULT_BETA,
};
use crate::distribution::{
    labeled_pool_distribution, select_by_mutual_information, unlabeled_image_distribution,
    ClassDistribution, CountMode, DistributionError, LabelCounts,
};
use crate::geometry::{map_predictions, AugmentationSpec, GeometryError, ImageSize};
use crate::ImageId;

pub const DEFAULT_EXPANSION_RATIO: f64 = 0.20;
pub const DEFAULT_RETENTION_THRESHOLD: f64 = 0.1;
pub const DEFAULT_BETA_STEP: f64 = 0.1;
pub const DEFAULT_BETA_STEPS: usize = 5;
/// Midpoint of the consistency range `[0, 2]`; where the base-point search starts.
pub const BETA_SEARCH_START: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no predictions for {} unlabeled image(s): {}", .0.len(), join_ids(.0))]
    IncompleteInput(Vec<ImageId>),
    #[error("image {image} has no predictions for augmentation {tag}")]
    MissingAugmentation { image: ImageId, tag: String },
    #[error("budget {budget} exceeds the {available} unlabeled candidates")]
    InsufficientCandidates { budget: usize, available: usize },
    #[error("unlabeled pool is empty")]
    EmptyUnlabeled,
    #[error("image {0} is in both the labeled and unlabeled pool")]
    OverlappingPools(ImageId),
    #[error("oracle has no labels for image {0}")]
    Oracle(ImageId),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn join_ids(ids: &[ImageId]) -> String {
    ids.iter().map(ImageId::as_str).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub beta: f64,
    pub expansion_ratio: f64,
    pub budget_per_cycle: usize,
    pub cycles: usize,
    pub augmentations: Vec<AugmentationSpec>,
    pub retention_threshold: f64,
    pub metric_variant: MetricVariant,
    pub default_m_policy: EmptyImagePolicy,
    pub count_mode: CountMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            expansion_ratio: DEFAULT_EXPANSION_RATIO,
            budget_per_cycle: 500,
            cycles: 1,
            augmentations: AugmentationSpec::default_set(),
            retention_threshold: DEFAULT_RETENTION_THRESHOLD,
            metric_variant: MetricVariant::Min,
            default_m_policy: EmptyImagePolicy::Beta,
            count_mode: CountMode::RawCounts,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |msg: String| Err(SelectionError::InvalidConfig(msg));
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return bad(format!("beta must be in (0, 2), got {}", self.beta));
        }
        if !(self.expansion_ratio >= 0.0 && self.expansion_ratio.is_finite()) {
            return bad(format!(
                "expansion ratio must be finite and >= 0, got {}",
                self.expansion_ratio
            ));
        }
        if self.cycles == 0 {
            return bad("cycles must be at least 1".into());
        }
        if self.augmentations.is_empty() {
            return bad("at least one augmentation is required".into());
        }
        for aug in &self.augmentations {
            aug.validate()?;
            if *aug == AugmentationSpec::Original {
                return bad("the original image is not an augmentation".into());
            }
        }
        let mut tags: Vec<&str> = self.augmentations.iter().map(|a| a.tag()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return bad("augmentations must have distinct kinds".into());
        }
        if !(0.0..=1.0).contains(&self.retention_threshold) {
            return bad(format!(
                "retention threshold must be in [0, 1], got {}",
                self.retention_threshold
            ));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            beta: self.beta,
            variant: self.metric_variant,
            empty_policy: self.default_m_policy,
        }
    }

    /// Stage-one pool size, `ceil(budget * (1 + expansion))`.
    pub fn initial_pool_size(&self) -> usize {
        let raw = self.budget_per_cycle as f64 * (1.0 + self.expansion_ratio);
        // absorb representation error such as 500 * 1.2 = 600.0000000000001
        (raw - 1e-9).ceil().max(0.0) as usize
    }
}

/// Everything the detector produced for one image: detections on the original
/// plus detections on each augmented copy, already in the augmented frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions {
    pub size: ImageSize,
    pub original: Vec<PredictionRecord>,
    pub augmented: Vec<(AugmentationSpec, Vec<PredictionRecord>)>,
}

impl ImagePredictions {
    pub fn augmented_by_tag(&self, tag: &str) -> Option<&(AugmentationSpec, Vec<PredictionRecord>)> {
        self.augmented.iter().find(|(a, _)| a.tag() == tag)
    }
}

pub trait PredictionSource: Sync {
    fn image_predictions(&self, id: &ImageId) -> Option<ImagePredictions>;
}

impl PredictionSource for IndexMap<ImageId, ImagePredictions> {
    fn image_predictions(&self, id: &ImageId) -> Option<ImagePredictions> {
        self.get(id).cloned()
    }
}

impl PredictionSource for BTreeMap<ImageId, ImagePredictions> {
    fn image_predictions(&self, id: &ImageId) -> Option<ImagePredictions> {
        self.get(id).cloned()
    }
}

/// Labeling authority: ground-truth per-class object counts for an image.
pub trait LabelOracle {
    fn label(&self, id: &ImageId) -> Option<LabelCounts>;
}

impl LabelOracle for IndexMap<ImageId, LabelCounts> {
    fn label(&self, id: &ImageId) -> Option<LabelCounts> {
        self.get(id).cloned()
    }
}

impl LabelOracle for HashMap<ImageId, LabelCounts> {
    fn label(&self, id: &ImageId) -> Option<LabelCounts> {
        self.get(id).cloned()
    }
}

impl LabelOracle for BTreeMap<ImageId, LabelCounts> {
    fn label(&self, id: &ImageId) -> Option<LabelCounts> {
        self.get(id).cloned()
    }
}

/// Stage-one score and class distribution of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub information: ImageInformation,
    pub distribution: ClassDistribution,
}

/// Scores one image: retained original detections are mapped into every
/// configured augmentation and matched against that augmentation's detections.
pub fn score_image(
    id: &ImageId,
    preds: &ImagePredictions,
    num_classes: usize,
    config: &SelectionConfig,
) -> Result<ScoredImage, SelectionError> {
    let original = retain_confident(&preds.original, config.retention_threshold);
    let mut views = Vec::with_capacity(config.augmentations.len());
    for aug in &config.augmentations {
        let (spec, detections) =
            preds
                .augmented_by_tag(aug.tag())
                .ok_or_else(|| SelectionError::MissingAugmentation {
                    image: id.clone(),
                    tag: aug.tag().to_owned(),
                })?;
        views.push(AugmentedView {
            augmentation: *spec,
            references: map_predictions(&original, spec, preds.size),
            predictions: retain_confident(detections, config.retention_threshold),
        });
    }
    let information = image_information(id.clone(), &views, &config.scoring())?;
    let distribution = unlabeled_image_distribution(
        num_classes,
        &original,
        views.iter().map(|v| v.predictions.as_slice()),
    )?;
    Ok(ScoredImage {
        information,
        distribution,
    })
}

/// Scores every id in order, in parallel. Output order equals input order.
pub fn score_images(
    ids: &[ImageId],
    source: &dyn PredictionSource,
    num_classes: usize,
    config: &SelectionConfig,
) -> Result<Vec<ScoredImage>, SelectionError> {
    let fetched: Vec<Option<ImagePredictions>> =
        ids.par_iter().map(|id| source.image_predictions(id)).collect();
    let missing: Vec<ImageId> = ids
        .iter()
        .zip(&fetched)
        .filter(|(_, p)| p.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(SelectionError::IncompleteInput(missing));
    }
    ids.par_iter()
        .zip(fetched.par_iter())
        .map(|(id, preds)| score_image(id, preds.as_ref().expect("checked above"), num_classes, config))
        .collect()
}

/// The `initial_pool_size` images with the smallest metric, ascending, ties by id.
pub fn stage_one(scores: &[ImageInformation], config: &SelectionConfig) -> Vec<ImageId> {
    let mut order: Vec<&ImageInformation> = scores.iter().collect();
    order.sort_by(|a, b| {
        a.metric
            .total_cmp(&b.metric)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    order
        .into_iter()
        .take(config.initial_pool_size())
        .map(|s| s.image_id.clone())
        .collect()
}

/// One ranked entry of a selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub image_id: ImageId,
    pub metric: f64,
    pub js: f64,
}

/// Both stages of one cycle, each in selection order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleReport {
    pub cycle: usize,
    pub initial: Vec<SelectionRow>,
    pub selected: Vec<SelectionRow>,
}

impl CycleReport {
    pub fn selected_ids(&self) -> Vec<ImageId> {
        self.selected.iter().map(|r| r.image_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    num_classes: usize,
    labeled: BTreeMap<ImageId, LabelCounts>,
    unlabeled: BTreeSet<ImageId>,
    cycle_index: usize,
    history: Vec<CycleReport>,
}

impl PoolState {
    pub fn new(
        num_classes: usize,
        labeled: impl IntoIterator<Item = (ImageId, LabelCounts)>,
        unlabeled: impl IntoIterator<Item = ImageId>,
    ) -> Result<Self, SelectionError> {
        let labeled: BTreeMap<ImageId, LabelCounts> = labeled.into_iter().collect();
        for counts in labeled.values() {
            if counts.num_classes() != num_classes {
                return Err(DistributionError::ClassCountMismatch {
                    expected: num_classes,
                    got: counts.num_classes(),
                }
                .into());
            }
        }
        let unlabeled: BTreeSet<ImageId> = unlabeled.into_iter().collect();
        if let Some(id) = unlabeled.iter().find(|id| labeled.contains_key(*id)) {
            return Err(SelectionError::OverlappingPools(id.clone()));
        }
        Ok(Self {
            num_classes,
            labeled,
            unlabeled,
            cycle_index: 0,
            history: Vec::new(),
        })
    }

    /// Everything unlabeled, then `initial_size` images drawn at random and labeled.
    pub fn with_random_initial(
        num_classes: usize,
        ids: impl IntoIterator<Item = ImageId>,
        initial_size: usize,
        oracle: &dyn LabelOracle,
        seed: u64,
    ) -> Result<Self, SelectionError> {
        let mut pool = Self::new(num_classes, [], ids)?;
        let picked = random_baseline(&pool, initial_size, seed)?;
        pool.label(&picked, oracle)?;
        Ok(pool)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labeled(&self) -> &BTreeMap<ImageId, LabelCounts> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<ImageId> {
        &self.unlabeled
    }

    pub fn cycle_index(&self) -> usize {
        self.cycle_index
    }

    pub fn history(&self) -> &[CycleReport] {
        &self.history
    }

    /// Per-class instance totals over the labeled pool.
    pub fn labeled_counts(&self) -> LabelCounts {
        let mut total = LabelCounts::zeros(self.num_classes);
        for counts in self.labeled.values() {
            total.add(counts).expect("class count checked on insert");
        }
        total
    }

    /// Queries the oracle for every id, then moves them all labeled-ward.
    /// Nothing changes if any query fails.
    pub fn label(&mut self, ids: &[ImageId], oracle: &dyn LabelOracle) -> Result<(), SelectionError> {
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            if !self.unlabeled.contains(id) {
                return Err(SelectionError::InvalidConfig(format!(
                    "image {id} is not in the unlabeled pool"
                )));
            }
            let counts = oracle.label(id).ok_or_else(|| SelectionError::Oracle(id.clone()))?;
            if counts.num_classes() != self.num_classes {
                return Err(DistributionError::ClassCountMismatch {
                    expected: self.num_classes,
                    got: counts.num_classes(),
                }
                .into());
            }
            labels.push((id.clone(), counts));
        }
        for (id, counts) in labels {
            self.unlabeled.remove(&id);
            self.labeled.insert(id, counts);
        }
        Ok(())
    }

    /// Runs both stages over the unlabeled pool without labeling anything.
    pub fn plan_cycle(
        &self,
        source: &dyn PredictionSource,
        config: &SelectionConfig,
    ) -> Result<CycleReport, SelectionError> {
        config.validate()?;
        let ids: Vec<ImageId> = self.unlabeled.iter().cloned().collect();
        let scored = score_images(&ids, source, self.num_classes, config)?;
        self.plan_from_scores(&scored, config)
    }

    /// Both stages over pre-computed scores. Scores must cover unlabeled images only.
    pub fn plan_from_scores(
        &self,
        scored: &[ScoredImage],
        config: &SelectionConfig,
    ) -> Result<CycleReport, SelectionError> {
        if config.budget_per_cycle > scored.len() {
            return Err(SelectionError::InsufficientCandidates {
                budget: config.budget_per_cycle,
                available: scored.len(),
            });
        }
        let infos: Vec<ImageInformation> = scored.iter().map(|s| s.information.clone()).collect();
        let by_id: HashMap<&ImageId, &ScoredImage> =
            scored.iter().map(|s| (&s.information.image_id, s)).collect();
        let initial_ids = stage_one(&infos, config);

        let labeled_dist = match labeled_pool_distribution(&self.labeled_counts(), config.count_mode) {
            Ok(d) => d,
            Err(DistributionError::EmptyPool) => ClassDistribution::uniform(self.num_classes),
            Err(e) => return Err(e.into()),
        };
        let candidates: Vec<(ImageId, ClassDistribution)> = initial_ids
            .iter()
            .map(|id| (id.clone(), by_id[id].distribution.clone()))
            .collect();
        let budget = config.budget_per_cycle.min(candidates.len());
        let everything = select_by_mutual_information(&candidates, &labeled_dist, candidates.len())?;
        let js_of: HashMap<&ImageId, f64> = everything.iter().map(|s| (&s.image_id, s.js)).collect();

        let row = |id: &ImageId| SelectionRow {
            image_id: id.clone(),
            metric: by_id[id].information.metric,
            js: js_of[id],
        };
        Ok(CycleReport {
            cycle: self.cycle_index + 1,
            initial: initial_ids.iter().map(row).collect(),
            selected: everything[..budget].iter().map(|s| row(&s.image_id)).collect(),
        })
    }

    /// Records a planned cycle: labels its selection and appends it to history.
    pub fn commit_cycle(
        &mut self,
        report: CycleReport,
        oracle: &dyn LabelOracle,
    ) -> Result<&CycleReport, SelectionError> {
        self.label(&report.selected_ids(), oracle)?;
        self.cycle_index += 1;
        self.history.push(report);
        Ok(self.history.last().expect("just pushed"))
    }

    /// One full cycle: score, both stages, oracle labeling, pool update.
    pub fn run_cycle(
        &mut self,
        source: &dyn PredictionSource,
        oracle: &dyn LabelOracle,
        config: &SelectionConfig,
    ) -> Result<&CycleReport, SelectionError> {
        if self.unlabeled.is_empty() {
            return Err(SelectionError::EmptyUnlabeled);
        }
        let report = self.plan_cycle(source, config)?;
        self.commit_cycle(report, oracle)
    }
}

/// Uniform sample of `budget` unlabeled ids without replacement, in draw order.
pub fn random_baseline(pool: &PoolState, budget: usize, seed: u64) -> Result<Vec<ImageId>, SelectionError> {
    let mut ids: Vec<ImageId> = pool.unlabeled.iter().cloned().collect();
    if budget > ids.len() {
        return Err(SelectionError::InsufficientCandidates {
            budget,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = ids.partial_shuffle(&mut rng, budget);
    Ok(picked.to_vec())
}

/// Hill-climbs the base point from the midpoint of the consistency range.
///
/// Each step compares the current point with one step either side and moves
/// to the strictly best; it stops at a local optimum or after `max_steps`
/// moves. Candidates outside `(0, 2)` are skipped. Each point is evaluated
/// at most once.
pub fn beta_search<E>(
    mut evaluate: impl FnMut(f64) -> Result<f64, E>,
    step: f64,
    max_steps: usize,
) -> Result<f64, E> {
    assert!(step > 0.0 && max_steps >= 1, "beta search needs step > 0 and max_steps >= 1");
    let at = |k: i64| BETA_SEARCH_START + k as f64 * step;
    let mut seen: BTreeMap<i64, f64> = BTreeMap::new();
    let mut quality = |k: i64, evaluate: &mut dyn FnMut(f64) -> Result<f64, E>| -> Result<f64, E> {
        if let Some(q) = seen.get(&k) {
            return Ok(*q);
        }
        let q = evaluate(at(k))?;
        seen.insert(k, q);
        Ok(q)
    };
    let mut k = 0i64;
    let mut current = quality(k, &mut evaluate)?;
    for _ in 0..max_steps {
        let mut best = (k, current);
        for cand in [k + 1, k - 1] {
            let beta = at(cand);
            if !(beta > 0.0 && beta < 2.0) {
                continue;
            }
            let q = quality(cand, &mut evaluate)?;
            if q > best.1 {
                best = (cand, q);
            }
        }
        if best.0 == k {
            break;
        }
        (k, current) = best;
    }
    Ok(at(k))
}
