//! Seeded synthetic world and detector for running whole selection loops
//! without a real detector.
//!
//! The detector's per-class skill grows with the number of labeled instances
//! of that class (`n / (n + kappa)`). Low skill means missed objects, box
//! jitter, softened and sometimes wrong class scores, all drawn independently
//! per augmented copy, so poorly learned classes are also the inconsistent
//! ones. Every random draw derives from one experiment seed through
//! [`split_seed`], so any (seed, image, augmentation) simulation can be
//! reproduced in isolation.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{js_divergence, PredictionRecord, ScoreVector};
use crate::distribution::{ClassDistribution, LabelCounts};
use crate::geometry::{iou, map_box, AugmentationSpec, BoundingBox, ImageSize};
use crate::io::{
    write_labels, write_predictions, AugmentationParams, DatasetManifest, IoError, LabelFileRecord,
    LabelObject,
};
use crate::pipeline::{
    random_baseline, score_images, CycleReport, ImagePredictions, LabelOracle, PoolState,
    PredictionSource, SelectionConfig, SelectionError,
};
use crate::ImageId;

const MIN_OBJECTS: usize = 1;
const MAX_OBJECTS: usize = 5;
/// Chance that an object shares its image's dominant class. Both draws follow
/// the same class frequencies, so overall proportions are unchanged.
const CLASS_COHESION: f64 = 0.75;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown strategy {0:?}; valid: cald, random, cald_mean_variant, cald_beta:<beta>")]
    UnknownStrategy(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// SplitMix64 finalizer over `seed ^ stream`; derives independent sub-seeds.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and runs.
fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

fn augmentation_key(aug: &AugmentationSpec) -> u64 {
    let param = match *aug {
        AugmentationSpec::Original | AugmentationSpec::HorizontalFlip => 0.0,
        AugmentationSpec::Cutout { area_fraction } => area_fraction,
        AugmentationSpec::Downsize { ratio } => ratio,
        AugmentationSpec::Rotation { degrees } => degrees,
        AugmentationSpec::GaussianNoise { sigma } => sigma,
        AugmentationSpec::SaltPepper { amount } => amount,
    };
    split_seed(stable_hash(aug.tag().as_bytes()), param.to_bits())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimImage {
    pub image_id: ImageId,
    pub size: ImageSize,
    pub objects: Vec<SimObject>,
}

impl SimImage {
    pub fn label_counts(&self, num_classes: usize) -> LabelCounts {
        LabelCounts::from_class_ids(num_classes, self.objects.iter().map(|o| o.class_id))
            .expect("generated class ids are in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub images: Vec<SimImage>,
    /// Sampling probability of each class, proportional to `rank^-exponent`.
    pub class_frequencies: Vec<f64>,
    index: HashMap<ImageId, usize>,
}

impl SimWorld {
    pub fn num_classes(&self) -> usize {
        self.class_frequencies.len()
    }

    pub fn image(&self, id: &ImageId) -> Option<&SimImage> {
        self.index.get(id).map(|&i| &self.images[i])
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &ImageId> {
        self.images.iter().map(|i| &i.image_id)
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = self.num_classes().saturating_sub(1).to_string().len().max(2);
        (0..self.num_classes()).map(|c| format!("class{c:0width$}")).collect()
    }

    /// Manifest describing this world with the given augmentation parameters.
    pub fn manifest(&self, augmentations: &[AugmentationSpec]) -> DatasetManifest {
        DatasetManifest::new(
            self.class_names(),
            self.image_ids().cloned().collect(),
            augmentations
                .iter()
                .map(|a| (a.tag().to_owned(), AugmentationParams::from_spec(a)))
                .collect(),
        )
        .expect("generated class names are unique")
    }

    /// Ground truth in `labels.jsonl` form.
    pub fn label_records(&self) -> Vec<LabelFileRecord> {
        let names = self.class_names();
        self.images
            .iter()
            .map(|img| LabelFileRecord {
                image_id: img.image_id.clone(),
                objects: img
                    .objects
                    .iter()
                    .map(|o| LabelObject {
                        class: names[o.class_id].clone(),
                        bbox: Some(o.bbox.as_array()),
                    })
                    .collect(),
            })
            .collect()
    }
}

pub fn generate_world(
    num_images: usize,
    num_classes: usize,
    imbalance_exponent: f64,
    seed: u64,
) -> Result<SimWorld, SimError> {
    if num_images == 0 || num_classes == 0 {
        return Err(SimError::InvalidParameter(
            "world needs at least one image and one class".into(),
        ));
    }
    if !(imbalance_exponent >= 0.0 && imbalance_exponent.is_finite()) {
        return Err(SimError::InvalidParameter(format!(
            "imbalance exponent must be finite and >= 0, got {imbalance_exponent}"
        )));
    }
    let weights: Vec<f64> = (1..=num_classes)
        .map(|rank| (rank as f64).powf(-imbalance_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let class_frequencies: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let classes = WeightedIndex::new(&weights).expect("weights are positive");

    let digits = (num_images - 1).to_string().len().max(5);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, stable_hash(b"world")));
    let mut images = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let width = rng.random_range(320..=640u32);
        let height = rng.random_range(240..=480u32);
        let size = ImageSize::new(width, height).expect("positive dimensions");
        let count = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
        let dominant = classes.sample(&mut rng);
        let objects = (0..count)
            .map(|_| {
                let class_id = if rng.random::<f64>() < CLASS_COHESION {
                    dominant
                } else {
                    classes.sample(&mut rng)
                };
                let (w, h) = (width as f64, height as f64);
                let bw = w * rng.random_range(0.1..0.5);
                let bh = h * rng.random_range(0.1..0.5);
                let x = rng.random_range(0.0..(w - bw));
                let y = rng.random_range(0.0..(h - bh));
                SimObject {
                    class_id,
                    bbox: BoundingBox::new(x, y, x + bw, y + bh).expect("positive extent"),
                }
            })
            .collect();
        images.push(SimImage {
            image_id: ImageId::new(format!("img{i:0digits$}")),
            size,
            objects,
        });
    }
    let index = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.clone(), i))
        .collect();
    Ok(SimWorld {
        images,
        class_frequencies,
        index,
    })
}

/// Noise knobs of the synthetic detector. Every noise term is scaled by
/// `1 - skill`, so a skill of 1 gives exact, augmentation-consistent output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    /// Labeled instances at which a class reaches skill 0.5.
    pub kappa: f64,
    /// Box jitter standard deviation at skill 0, as a fraction of box size.
    pub jitter_scale: f64,
    /// Probability of missing an object at skill 0.
    pub miss_rate: f64,
    /// Misclassification probability at skill 0.
    pub misclassification: f64,
    /// Softmax temperature of the class scores at skill 0.
    pub temperature: f64,
    /// Standard deviation of per-class logit noise at skill 0.
    pub logit_noise: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            kappa: 20.0,
            jitter_scale: 0.1,
            miss_rate: 0.5,
            misclassification: 0.3,
            temperature: 0.25,
            logit_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDetectorModel {
    pub params: DetectorParams,
    skills: Vec<f64>,
}

impl SimDetectorModel {
    /// Skill per class from labeled instance counts.
    pub fn from_counts(counts: &LabelCounts, params: DetectorParams) -> Self {
        let skills = counts
            .as_slice()
            .iter()
            .map(|&n| n as f64 / (n as f64 + params.kappa))
            .collect();
        Self { params, skills }
    }

    /// Same skill for every class; `1.0` is the noiseless limit.
    pub fn uniform(num_classes: usize, skill: f64, params: DetectorParams) -> Self {
        Self {
            params,
            skills: vec![skill.clamp(0.0, 1.0); num_classes],
        }
    }

    pub fn skill(&self, class_id: usize) -> f64 {
        self.skills[class_id]
    }

    pub fn skills(&self) -> &[f64] {
        &self.skills
    }

    pub fn detection_probability(&self, class_id: usize) -> f64 {
        1.0 - self.params.miss_rate * (1.0 - self.skill(class_id))
    }
}

/// The occluding rectangle of a cutout augmentation: fixed aspect ratio,
/// centre drawn from the middle half of the image.
pub fn cutout_region(image: &SimImage, area_fraction: f64, seed: u64) -> Option<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(
        split_seed(seed, stable_hash(image.image_id.as_str().as_bytes())),
        stable_hash(b"cutout"),
    ));
    let (w, h) = (image.size.width() as f64, image.size.height() as f64);
    let side = area_fraction.sqrt();
    let cx = rng.random_range(0.25 * w..=0.75 * w);
    let cy = rng.random_range(0.25 * h..=0.75 * h);
    let (hw, hh) = (0.5 * side * w, 0.5 * side * h);
    BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
        .ok()
        .and_then(|b| b.clip(image.size))
}

fn one_hot(num_classes: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

fn class_scores(rng: &mut ChaCha8Rng, num_classes: usize, class: usize, skill: f64, p: &DetectorParams) -> Vec<f64> {
    let temperature = p.temperature * (1.0 - skill);
    if temperature <= 0.0 {
        return one_hot(num_classes, class);
    }
    let noise = p.logit_noise * (1.0 - skill);
    let logits: Vec<f64> = (0..num_classes)
        .map(|j| {
            let base = if j == class { 1.0 / temperature } else { 0.0 };
            base + noise * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total).clamp(0.0, 1.0)).collect()
}

/// Synthetic detector output for one image under one augmentation, in the
/// augmented frame. Deterministic in `(seed, image id, augmentation)`.
pub fn simulate_detector(
    world: &SimWorld,
    model: &SimDetectorModel,
    image: &SimImage,
    aug: &AugmentationSpec,
    seed: u64,
) -> Vec<PredictionRecord> {
    let num_classes = world.num_classes();
    let p = &model.params;
    let image_key = stable_hash(image.image_id.as_str().as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split_seed(image_key, augmentation_key(aug))));
    // whether an object is found, and which class it is taken for, is shared
    // by every view of the image
    let mut detect_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, image_key));
    let frame = aug.output_size(image.size);
    let occluder = match *aug {
        AugmentationSpec::Cutout { area_fraction } => cutout_region(image, area_fraction, seed),
        _ => None,
    };

    let mut out = Vec::with_capacity(image.objects.len());
    for obj in &image.objects {
        let skill = model.skill(obj.class_id);
        let miss = 1.0 - skill;
        // fixed number of draws per object keeps streams aligned across skills
        let detect_draw: f64 = detect_rng.random();
        let jitter: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let class_draw: f64 = detect_rng.random();
        let wrong_class = detect_rng.random_range(0..num_classes.max(2) - 1);
        let score_seed: u64 = rng.random();

        let mut p_detect = model.detection_probability(obj.class_id);
        if let Some(region) = &occluder {
            let covered = region.intersection_area(&obj.bbox) / obj.bbox.area();
            p_detect *= 1.0 - covered * miss;
        }
        if detect_draw >= p_detect {
            continue;
        }
        let Ok(mapped) = map_box(&obj.bbox, aug, image.size) else {
            continue;
        };
        let sx = miss * p.jitter_scale * mapped.width();
        let sy = miss * p.jitter_scale * mapped.height();
        let xa = mapped.x_min() + sx * jitter[0];
        let ya = mapped.y_min() + sy * jitter[1];
        let xb = mapped.x_max() + sx * jitter[2];
        let yb = mapped.y_max() + sy * jitter[3];
        let Some(bbox) = BoundingBox::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
            .ok()
            .and_then(|b| b.clip(frame))
        else {
            continue;
        };

        let predicted = if num_classes > 1 && class_draw < miss * p.misclassification {
            // uniform over the other classes
            if wrong_class >= obj.class_id {
                wrong_class + 1
            } else {
                wrong_class
            }
        } else {
            obj.class_id
        };
        let mut score_rng = ChaCha8Rng::seed_from_u64(score_seed);
        let scores = class_scores(&mut score_rng, num_classes, predicted, skill, p);
        out.push(PredictionRecord::new(
            bbox,
            ScoreVector::new(scores).expect("softmax output lies in [0, 1]"),
        ));
    }
    out
}

/// Informativeness proxy for one image: `1 - mean best IoU` over ground-truth
/// objects plus the fraction of objects that are missed or misclassified.
pub fn detection_error(image: &SimImage, predictions: &[PredictionRecord]) -> f64 {
    if image.objects.is_empty() {
        return 0.0;
    }
    let mut iou_sum = 0.0;
    let mut wrong = 0usize;
    for obj in &image.objects {
        let mut best: Option<(f64, &PredictionRecord)> = None;
        for p in predictions {
            let v = iou(&obj.bbox, &p.bbox);
            if v > 0.0 && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, p));
            }
        }
        match best {
            Some((v, p)) => {
                iou_sum += v;
                if p.scores.argmax() != Some(obj.class_id) {
                    wrong += 1;
                }
            }
            None => wrong += 1,
        }
    }
    let n = image.objects.len() as f64;
    (1.0 - iou_sum / n) + wrong as f64 / n
}

/// Serves simulated predictions to the selection pipeline.
pub struct SimPredictionSource<'a> {
    pub world: &'a SimWorld,
    pub model: &'a SimDetectorModel,
    pub augmentations: &'a [AugmentationSpec],
    pub seed: u64,
}

impl PredictionSource for SimPredictionSource<'_> {
    fn image_predictions(&self, id: &ImageId) -> Option<ImagePredictions> {
        let image = self.world.image(id)?;
        Some(ImagePredictions {
            size: image.size,
            original: simulate_detector(self.world, self.model, image, &AugmentationSpec::Original, self.seed),
            augmented: self
                .augmentations
                .iter()
                .map(|a| (*a, simulate_detector(self.world, self.model, image, a, self.seed)))
                .collect(),
        })
    }
}

/// Ground truth of the world, as a labeling oracle.
pub struct SimOracle<'a>(pub &'a SimWorld);

impl LabelOracle for SimOracle<'_> {
    fn label(&self, id: &ImageId) -> Option<LabelCounts> {
        self.0.image(id).map(|img| img.label_counts(self.0.num_classes()))
    }
}

/// Writes the world's predictions under `model` as `predictions.jsonl`.
pub fn export_predictions(
    out: impl Write,
    world: &SimWorld,
    model: &SimDetectorModel,
    augmentations: &[AugmentationSpec],
    seed: u64,
) -> Result<(), SimError> {
    let source = SimPredictionSource {
        world,
        model,
        augmentations,
        seed,
    };
    let images: Vec<(ImageId, ImagePredictions)> = world
        .image_ids()
        .map(|id| (id.clone(), source.image_predictions(id).expect("id from world")))
        .collect();
    write_predictions(out, images.iter().map(|(id, p)| (id, p)), &world.manifest(augmentations))?;
    Ok(())
}

pub fn export_labels(out: impl Write, world: &SimWorld) -> Result<(), SimError> {
    write_labels(out, &world.label_records())?;
    Ok(())
}

/// Largest f64 below 2.
const BETA_CEILING: f64 = 1.9999999999999998;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Cald,
    Random,
    CaldMeanVariant,
    CaldBeta(f64),
}

impl Strategy {
    fn selection_config(&self, base: &SelectionConfig) -> SelectionConfig {
        let mut cfg = base.clone();
        match *self {
            Strategy::CaldMeanVariant => cfg.metric_variant = crate::consistency::MetricVariant::Mean,
            // the metric needs beta < 2, so the upper-end ablation runs just below it
            Strategy::CaldBeta(beta) => cfg.beta = beta.min(BETA_CEILING),
            Strategy::Cald | Strategy::Random => {}
        }
        cfg
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Cald => f.write_str("cald"),
            Strategy::Random => f.write_str("random"),
            Strategy::CaldMeanVariant => f.write_str("cald_mean_variant"),
            Strategy::CaldBeta(b) => write!(f, "cald_beta:{b}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cald" => Ok(Strategy::Cald),
            "random" => Ok(Strategy::Random),
            "cald_mean_variant" => Ok(Strategy::CaldMeanVariant),
            _ => {
                let beta = s
                    .strip_prefix("cald_beta:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .ok_or_else(|| SimError::UnknownStrategy(s.to_owned()))?;
                if !(beta > 0.0 && beta <= 2.0) {
                    return Err(SimError::InvalidParameter(format!(
                        "cald_beta needs beta in (0, 2], got {beta}"
                    )));
                }
                Ok(Strategy::CaldBeta(beta))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub imbalance_exponent: f64,
    pub initial_labeled: usize,
    pub selection: SelectionConfig,
    pub detector: DetectorParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_images: 2000,
            num_classes: 20,
            imbalance_exponent: 1.0,
            initial_labeled: 100,
            selection: SelectionConfig {
                budget_per_cycle: 100,
                cycles: 2,
                ..Default::default()
            },
            detector: DetectorParams::default(),
        }
    }
}

/// One (strategy, seed, cycle) row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub strategy: String,
    pub seed: u64,
    pub cycle: usize,
    /// Mean detection error over the images selected this cycle.
    pub mean_error: f64,
    /// JS divergence of the labeled pool's class proportions from uniform, after labeling.
    pub balance_js: f64,
    #[serde(rename = "mean_M_selected")]
    pub mean_m_selected: f64,
    /// Mean metric of the labeled pool before this cycle's images join it.
    #[serde(rename = "mean_M_labeled")]
    pub mean_m_labeled: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<CycleMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Seed-aggregated metrics of one (strategy, cycle).
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSummary {
    pub strategy: String,
    pub cycle: usize,
    pub seeds: usize,
    pub mean_error: MeanStd,
    pub balance_js: MeanStd,
    pub mean_m_selected: MeanStd,
    pub mean_m_labeled: MeanStd,
}

impl MetricsTable {
    pub fn for_cycle(&self, cycle: usize) -> impl Iterator<Item = &CycleMetrics> {
        self.rows.iter().filter(move |r| r.cycle == cycle)
    }

    pub fn row(&self, seed: u64, cycle: usize) -> Option<&CycleMetrics> {
        self.rows.iter().find(|r| r.seed == seed && r.cycle == cycle)
    }

    /// Mean and sample standard deviation across seeds, per (strategy, cycle).
    pub fn summary(&self) -> Vec<CycleSummary> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.strategy.clone(), r.cycle);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(strategy, cycle)| {
                let rows: Vec<&CycleMetrics> = self
                    .rows
                    .iter()
                    .filter(|r| r.strategy == strategy && r.cycle == cycle)
                    .collect();
                let col = |f: fn(&CycleMetrics) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                CycleSummary {
                    seeds: rows.len(),
                    mean_error: col(|r| r.mean_error),
                    balance_js: col(|r| r.balance_js),
                    mean_m_selected: col(|r| r.mean_m_selected),
                    mean_m_labeled: col(|r| r.mean_m_labeled),
                    strategy,
                    cycle,
                }
            })
            .collect()
    }

    /// CSV with columns strategy, seed, cycle, mean_error, balance_js,
    /// mean_M_selected, mean_M_labeled.
    pub fn write_csv(&self, out: impl Write) -> Result<(), SimError> {
        let mut writer = csv::Writer::from_writer(out);
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush().map_err(IoError::from)?;
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self, SimError> {
        let mut reader = csv::Reader::from_reader(input);
        let rows = reader.deserialize().collect::<Result<Vec<CycleMetrics>, _>>()?;
        Ok(Self { rows })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Class-balance proxy: JS divergence between the labeled pool's instance
/// proportions and the uniform distribution.
pub fn balance_divergence(counts: &LabelCounts) -> f64 {
    match ClassDistribution::proportional(counts) {
        Some(d) => js_divergence(d.as_slice(), ClassDistribution::uniform(counts.num_classes()).as_slice())
            .expect("both are distributions"),
        None => 0.0,
    }
}

const STREAM_INITIAL_POOL: u64 = 0x1;
const STREAM_DETECTOR: u64 = 0x2;
const STREAM_RANDOM: u64 = 0x3;

fn run_seed(strategy: Strategy, config: &ExperimentConfig, seed: u64) -> Result<Vec<CycleMetrics>, SimError> {
    let selection = strategy.selection_config(&config.selection);
    selection.validate()?;

    let world = generate_world(config.num_images, config.num_classes, config.imbalance_exponent, seed)?;
    let oracle = SimOracle(&world);
    let mut pool = PoolState::with_random_initial(
        world.num_classes(),
        world.image_ids().cloned(),
        config.initial_labeled.min(world.images.len()),
        &oracle,
        split_seed(seed, STREAM_INITIAL_POOL),
    )?;

    let mut rows = Vec::with_capacity(selection.cycles);
    for cycle in 1..=selection.cycles {
        if pool.unlabeled().is_empty() {
            break;
        }
        let model = SimDetectorModel::from_counts(&pool.labeled_counts(), config.detector);
        let detector_seed = split_seed(split_seed(seed, STREAM_DETECTOR), cycle as u64);
        let source = SimPredictionSource {
            world: &world,
            model: &model,
            augmentations: &selection.augmentations,
            seed: detector_seed,
        };
        let unlabeled: Vec<ImageId> = pool.unlabeled().iter().cloned().collect();
        let labeled: Vec<ImageId> = pool.labeled().keys().cloned().collect();
        let scored_unlabeled = score_images(&unlabeled, &source, world.num_classes(), &selection)?;
        let scored_labeled = score_images(&labeled, &source, world.num_classes(), &selection)?;
        let metric_of: HashMap<&ImageId, f64> = scored_unlabeled
            .iter()
            .map(|s| (&s.information.image_id, s.information.metric))
            .collect();

        // the last cycle may find fewer images left than the budget
        let cycle_config = SelectionConfig {
            budget_per_cycle: selection.budget_per_cycle.min(unlabeled.len()),
            ..selection.clone()
        };
        let selected: Vec<ImageId> = match strategy {
            Strategy::Random => random_baseline(
                &pool,
                cycle_config.budget_per_cycle,
                split_seed(split_seed(seed, STREAM_RANDOM), cycle as u64),
            )?,
            _ => pool.plan_from_scores(&scored_unlabeled, &cycle_config)?.selected_ids(),
        };

        let mean_error = mean(selected.iter().map(|id| {
            let image = world.image(id).expect("selected from world");
            let preds = simulate_detector(&world, &model, image, &AugmentationSpec::Original, detector_seed);
            detection_error(image, &preds)
        }));
        let mean_m_selected = mean(selected.iter().map(|id| metric_of[id]));
        let mean_m_labeled = mean(scored_labeled.iter().map(|s| s.information.metric));

        pool.label(&selected, &oracle)?;
        rows.push(CycleMetrics {
            strategy: strategy.to_string(),
            seed,
            cycle,
            mean_error,
            balance_js: balance_divergence(&pool.labeled_counts()),
            mean_m_selected,
            mean_m_labeled,
        });
    }
    Ok(rows)
}

/// Runs `strategy` once per seed. Seeds run in parallel; rows come back in
/// seed order, then cycle order.
pub fn run_experiment(
    strategy: Strategy,
    config: &ExperimentConfig,
    seeds: &[u64],
) -> Result<MetricsTable, SimError> {
    if seeds.is_empty() {
        return Err(SimError::InvalidParameter("at least one seed is required".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&seed| run_seed(strategy, config, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsTable {
        rows: per_seed.into_iter().flatten().collect(),
    })
}

/// Report of the selection a CALD cycle would make on a fresh world, for
/// callers that want the selection file rather than metrics.
pub fn plan_first_cycle(config: &ExperimentConfig, seed: u64) -> Result<CycleReport, SimError> {
    let world = generate_world(config.num_images, config.num_classes, config.imbalance_exponent, seed)?;
    let oracle = SimOracle(&world);
    let pool = PoolState::with_random_initial(
        world.num_classes(),
        world.image_ids().cloned(),
        config.initial_labeled.min(world.images.len()),
        &oracle,
        split_seed(seed, STREAM_INITIAL_POOL),
    )?;
    let model = SimDetectorModel::from_counts(&pool.labeled_counts(), config.detector);
    let source = SimPredictionSource {
        world: &world,
        model: &model,
        augmentations: &config.selection.augmentations,
        seed: split_seed(split_seed(seed, STREAM_DETECTOR), 1),
    };
    Ok(pool.plan_cycle(&source, &config.selection)?)
}
