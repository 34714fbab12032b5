//! File formats: `manifest.json`, `predictions.jsonl`, `labels.jsonl`,
//! `selection.jsonl`, plus the per-image score report.
//!
//! All record files are one JSON object per line. Parsers stream line by line
//! and report the 1-based line number of the first bad record.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{ImageInformation, PredictionRecord, ScoreVector};
use crate::distribution::LabelCounts;
use crate::geometry::{AugmentationSpec, BoundingBox, GeometryError, ImageSize};
use crate::pipeline::{CycleReport, ImagePredictions, SelectionRow};
use crate::ImageId;

pub const ORIGINAL_TAG: &str = "original";
pub const SELECTION_FORMAT: &str = "cald-selection";
pub const SELECTION_VERSION: u32 = 1;
/// Slack, in pixels, allowed when checking that a box lies inside its frame.
pub const FRAME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate record for image {image_id} augmentation {augmentation}")]
    Duplicate {
        line: usize,
        image_id: ImageId,
        augmentation: String,
    },
    #[error("image {0} has no \"original\" record")]
    IncompleteImage(ImageId),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(line: usize, message: impl Into<String>) -> IoError {
    IoError::Malformed {
        line,
        message: message.into(),
    }
}

/// Optional parameter overrides for one augmentation tag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<f64>,
}

impl AugmentationParams {
    pub fn from_spec(spec: &AugmentationSpec) -> Self {
        let mut p = Self::default();
        match *spec {
            AugmentationSpec::Downsize { ratio } => p.ratio = Some(ratio),
            AugmentationSpec::Rotation { degrees } => p.degrees = Some(degrees),
            AugmentationSpec::Cutout { area_fraction } => p.area_fraction = Some(area_fraction),
            AugmentationSpec::GaussianNoise { sigma } => p.sigma = Some(sigma),
            AugmentationSpec::SaltPepper { amount } => p.amount = Some(amount),
            AugmentationSpec::Original | AugmentationSpec::HorizontalFlip => {}
        }
        p
    }

    fn apply(&self, tag: &str) -> Result<AugmentationSpec, GeometryError> {
        let base = AugmentationSpec::from_tag(tag)
            .ok_or_else(|| GeometryError::InvalidAugmentation(format!("unknown tag {tag:?}")))?;
        let spec = match base {
            AugmentationSpec::Downsize { ratio } => AugmentationSpec::downsize(self.ratio.unwrap_or(ratio))?,
            AugmentationSpec::Rotation { degrees } => {
                AugmentationSpec::rotation(self.degrees.unwrap_or(degrees))?
            }
            AugmentationSpec::Cutout { area_fraction } => {
                AugmentationSpec::cutout(self.area_fraction.unwrap_or(area_fraction))?
            }
            AugmentationSpec::GaussianNoise { sigma } => {
                AugmentationSpec::gaussian_noise(self.sigma.unwrap_or(sigma))?
            }
            AugmentationSpec::SaltPepper { amount } => {
                AugmentationSpec::salt_pepper(self.amount.unwrap_or(amount))?
            }
            other => other,
        };
        Ok(spec)
    }
}

/// Class vocabulary, image list and augmentation parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub image_ids: Vec<ImageId>,
    #[serde(default)]
    pub augmentations: BTreeMap<String, AugmentationParams>,
    #[serde(skip)]
    class_index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        class_names: Vec<String>,
        image_ids: Vec<ImageId>,
        augmentations: BTreeMap<String, AugmentationParams>,
    ) -> Result<Self, IoError> {
        let mut manifest = Self {
            class_names,
            image_ids,
            augmentations,
            class_index: HashMap::new(),
        };
        manifest.index()?;
        Ok(manifest)
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self, IoError> {
        let mut manifest: Self =
            serde_json::from_reader(reader).map_err(|e| IoError::InvalidManifest(e.to_string()))?;
        manifest.index()?;
        Ok(manifest)
    }

    pub fn write(&self, mut out: impl Write) -> Result<(), IoError> {
        serde_json::to_writer_pretty(&mut out, self).map_err(std::io::Error::from)?;
        writeln!(out)?;
        Ok(())
    }

    fn index(&mut self) -> Result<(), IoError> {
        if self.class_names.is_empty() {
            return Err(IoError::InvalidManifest("class_names is empty".into()));
        }
        self.class_index.clear();
        for (i, name) in self.class_names.iter().enumerate() {
            if name.is_empty() {
                return Err(IoError::InvalidManifest(format!("class {i} has an empty name")));
            }
            if self.class_index.insert(name.clone(), i).is_some() {
                return Err(IoError::InvalidManifest(format!("duplicate class name {name:?}")));
            }
        }
        for tag in self.augmentations.keys() {
            self.augmentation(tag)
                .map_err(|e| IoError::InvalidManifest(format!("augmentation {tag:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_index.get(name).copied()
    }

    /// The augmentation for a tag, with any manifest overrides applied.
    pub fn augmentation(&self, tag: &str) -> Result<AugmentationSpec, GeometryError> {
        self.augmentations
            .get(tag)
            .cloned()
            .unwrap_or_default()
            .apply(tag)
    }

    /// Parses a letter combination such as `"FCDR"` using manifest parameters.
    pub fn augmentation_set(&self, letters: &str) -> Result<Vec<AugmentationSpec>, GeometryError> {
        AugmentationSpec::parse_combination(letters)?
            .iter()
            .map(|a| self.augmentation(a.tag()))
            .collect()
    }

    /// Dense score vector in manifest class order; absent classes are 0.
    pub fn densify(&self, scores: &IndexMap<String, f64>) -> Result<ScoreVector, String> {
        let mut dense = vec![0.0; self.num_classes()];
        for (name, &value) in scores {
            let idx = self
                .class_id(name)
                .ok_or_else(|| format!("unknown class {name:?}"))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(format!("confidence {value} for class {name:?} is outside [0, 1]"));
            }
            dense[idx] = value;
        }
        ScoreVector::new(dense).map_err(|e| e.to_string())
    }

    /// Sparse name map of the non-zero entries, in manifest order.
    pub fn sparsify(&self, scores: &ScoreVector) -> IndexMap<String, f64> {
        self.class_names
            .iter()
            .zip(scores.as_slice())
            .filter(|(_, v)| **v > 0.0)
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scores: IndexMap<String, f64>,
}

/// One line of `predictions.jsonl`: the detections for one (image, augmentation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFileRecord {
    pub image_id: ImageId,
    pub augmentation: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionEntry>,
}

impl PredictionFileRecord {
    pub fn from_predictions(
        image_id: ImageId,
        augmentation: &AugmentationSpec,
        frame: ImageSize,
        preds: &[PredictionRecord],
        manifest: &DatasetManifest,
    ) -> Self {
        Self {
            image_id,
            augmentation: augmentation.tag().to_owned(),
            width: frame.width(),
            height: frame.height(),
            detections: preds
                .iter()
                .map(|p| DetectionEntry {
                    bbox: p.bbox.as_array(),
                    scores: manifest.sparsify(&p.scores),
                })
                .collect(),
        }
    }
}

#[derive(Default)]
struct PartialImage {
    size: Option<ImageSize>,
    original: Option<Vec<PredictionRecord>>,
    augmented: Vec<(AugmentationSpec, Vec<PredictionRecord>)>,
}

/// Parses `predictions.jsonl` into per-image prediction sets, in first-seen order.
pub fn parse_predictions(
    reader: impl BufRead,
    manifest: &DatasetManifest,
) -> Result<IndexMap<ImageId, ImagePredictions>, IoError> {
    let mut images: IndexMap<ImageId, PartialImage> = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionFileRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let frame = ImageSize::new(record.width, record.height).map_err(|e| malformed(line_no, e.to_string()))?;
        let spec = manifest
            .augmentation(&record.augmentation)
            .map_err(|e| malformed(line_no, e.to_string()))?;
        let mut preds = Vec::with_capacity(record.detections.len());
        for det in &record.detections {
            let bbox = BoundingBox::from_array(det.bbox).map_err(|e| malformed(line_no, e.to_string()))?;
            if !frame.contains(&bbox, FRAME_TOLERANCE) {
                return Err(malformed(
                    line_no,
                    format!("box {:?} lies outside the {}x{} frame", det.bbox, record.width, record.height),
                ));
            }
            let scores = manifest.densify(&det.scores).map_err(|m| malformed(line_no, m))?;
            preds.push(PredictionRecord::new(bbox, scores));
        }

        let entry = images.entry(record.image_id.clone()).or_default();
        let duplicate = if spec == AugmentationSpec::Original {
            entry.original.is_some()
        } else {
            entry.augmented.iter().any(|(a, _)| a.tag() == spec.tag())
        };
        if duplicate {
            return Err(IoError::Duplicate {
                line: line_no,
                image_id: record.image_id,
                augmentation: record.augmentation,
            });
        }
        if spec == AugmentationSpec::Original {
            entry.size = Some(frame);
            entry.original = Some(preds);
        } else {
            entry.augmented.push((spec, preds));
        }
    }

    images
        .into_iter()
        .map(|(id, part)| match (part.size, part.original) {
            (Some(size), Some(original)) => Ok((
                id,
                ImagePredictions {
                    size,
                    original,
                    augmented: part.augmented,
                },
            )),
            _ => Err(IoError::IncompleteImage(id)),
        })
        .collect()
}

/// Writes one record per (image, augmentation), original first.
pub fn write_predictions<'a>(
    mut out: impl Write,
    images: impl IntoIterator<Item = (&'a ImageId, &'a ImagePredictions)>,
    manifest: &DatasetManifest,
) -> Result<(), IoError> {
    for (id, preds) in images {
        let original = PredictionFileRecord::from_predictions(
            id.clone(),
            &AugmentationSpec::Original,
            preds.size,
            &preds.original,
            manifest,
        );
        write_line(&mut out, &original)?;
        for (spec, dets) in &preds.augmented {
            let rec = PredictionFileRecord::from_predictions(
                id.clone(),
                spec,
                spec.output_size(preds.size),
                dets,
                manifest,
            );
            write_line(&mut out, &rec)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelObject {
    pub class: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFileRecord {
    pub image_id: ImageId,
    pub objects: Vec<LabelObject>,
}

pub fn parse_labels(
    reader: impl BufRead,
    manifest: &DatasetManifest,
) -> Result<IndexMap<ImageId, LabelCounts>, IoError> {
    let mut out = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelFileRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let ids = record
            .objects
            .iter()
            .map(|o| {
                manifest
                    .class_id(&o.class)
                    .ok_or_else(|| malformed(line_no, format!("unknown class {:?}", o.class)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let counts = LabelCounts::from_class_ids(manifest.num_classes(), ids)
            .expect("class ids come from the manifest");
        if out.contains_key(&record.image_id) {
            return Err(IoError::Duplicate {
                line: line_no,
                image_id: record.image_id,
                augmentation: "labels".into(),
            });
        }
        out.insert(record.image_id, counts);
    }
    Ok(out)
}

pub fn write_labels<'a>(
    mut out: impl Write,
    records: impl IntoIterator<Item = &'a LabelFileRecord>,
) -> Result<(), IoError> {
    for rec in records {
        write_line(&mut out, rec)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SelectionHeader {
    format: String,
    version: u32,
    fields: Vec<String>,
}

impl SelectionHeader {
    fn current() -> Self {
        Self {
            format: SELECTION_FORMAT.into(),
            version: SELECTION_VERSION,
            fields: ["cycle", "rank", "image_id", "metric_M", "js_mutual", "stage"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// One line of `selection.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionFileRecord {
    pub cycle: usize,
    pub rank: usize,
    pub image_id: ImageId,
    #[serde(rename = "metric_M")]
    pub metric_m: f64,
    pub js_mutual: f64,
    pub stage: Stage,
}

/// Header line, then for each cycle its stage-one rows and its final rows,
/// each ranked from 1 in selection order.
pub fn write_selection(mut out: impl Write, reports: &[CycleReport]) -> Result<(), IoError> {
    write_line(&mut out, &SelectionHeader::current())?;
    for report in reports {
        for (stage, rows) in [(Stage::Initial, &report.initial), (Stage::Final, &report.selected)] {
            for (i, row) in rows.iter().enumerate() {
                write_line(
                    &mut out,
                    &SelectionFileRecord {
                        cycle: report.cycle,
                        rank: i + 1,
                        image_id: row.image_id.clone(),
                        metric_m: row.metric,
                        js_mutual: row.js,
                        stage,
                    },
                )?;
            }
        }
    }
    Ok(())
}

/// Reads a file produced by [`write_selection`] back into per-cycle reports.
pub fn parse_selection(reader: impl BufRead) -> Result<Vec<CycleReport>, IoError> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| {
        l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
    });
    let Some((idx, header)) = lines.next() else {
        return Err(malformed(1, "missing selection header"));
    };
    let header: SelectionHeader =
        serde_json::from_str(&header?).map_err(|e| malformed(idx + 1, e.to_string()))?;
    if header.format != SELECTION_FORMAT || header.version != SELECTION_VERSION {
        return Err(malformed(idx + 1, "unsupported selection format"));
    }
    let mut reports: Vec<CycleReport> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let rec: SelectionFileRecord =
            serde_json::from_str(&line?).map_err(|e| malformed(line_no, e.to_string()))?;
        if reports.last().is_none_or(|r| r.cycle != rec.cycle) {
            reports.push(CycleReport {
                cycle: rec.cycle,
                ..Default::default()
            });
        }
        let report = reports.last_mut().expect("pushed above");
        let rows = match rec.stage {
            Stage::Initial => &mut report.initial,
            Stage::Final => &mut report.selected,
        };
        if rec.rank != rows.len() + 1 {
            return Err(malformed(line_no, format!("rank {} out of sequence", rec.rank)));
        }
        rows.push(SelectionRow {
            image_id: rec.image_id,
            metric: rec.metric_m,
            js: rec.js_mutual,
        });
    }
    Ok(reports)
}

/// One line of the score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFileRecord {
    pub image_id: ImageId,
    #[serde(rename = "metric_M")]
    pub metric_m: f64,
    pub no_references: bool,
    pub per_augmentation: IndexMap<String, f64>,
}

/// Writes per-image metrics sorted ascending (ties by image id).
pub fn write_scores(mut out: impl Write, infos: &[ImageInformation]) -> Result<(), IoError> {
    let mut sorted: Vec<&ImageInformation> = infos.iter().collect();
    sorted.sort_by(|a, b| a.metric.total_cmp(&b.metric).then_with(|| a.image_id.cmp(&b.image_id)));
    for info in sorted {
        write_line(
            &mut out,
            &ScoreFileRecord {
                image_id: info.image_id.clone(),
                metric_m: info.metric,
                no_references: info.no_references,
                per_augmentation: info
                    .per_augmentation
                    .iter()
                    .map(|(a, d)| (a.tag().to_owned(), *d))
                    .collect(),
            },
        )?;
    }
    Ok(())
}

fn write_line(out: &mut impl Write, value: &impl Serialize) -> Result<(), IoError> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}
