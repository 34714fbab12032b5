//! Axis-aligned box arithmetic and transport of boxes into augmented frames.
//!
//! Everything here is a pure function of immutable values. Boxes are in
//! pixel coordinates with the origin at the top-left corner and the y axis
//! pointing down.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::PredictionRecord;

pub const DEFAULT_ROTATION_DEGREES: f64 = 5.0;
pub const DEFAULT_DOWNSIZE_RATIO: f64 = 0.8;
pub const DEFAULT_CUTOUT_AREA: f64 = 0.2;
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.05;
pub const DEFAULT_SALT_PEPPER_AMOUNT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("image size must be at least 1x1, got {width}x{height}")]
    InvalidSize { width: u32, height: u32 },
    #[error("invalid box [{0}, {1}, {2}, {3}]: need finite coordinates with min < max")]
    InvalidBox(f64, f64, f64, f64),
    #[error("invalid augmentation parameter: {0}")]
    InvalidAugmentation(String),
    #[error("box collapsed to zero area after mapping through {0}")]
    MappingDegenerate(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    width: u32,
    height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidSize { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Whether `b` lies inside `[0, width] x [0, height]`, allowing `tol` pixels of slack.
    pub fn contains(&self, b: &BoundingBox, tol: f64) -> bool {
        b.x_min >= -tol
            && b.y_min >= -tol
            && b.x_max <= self.width as f64 + tol
            && b.y_max <= self.height as f64 + tol
    }
}

/// An axis-aligned box `[x_min, y_min, x_max, y_max]` with positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(coords: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(coords[0], coords[1], coords[2], coords[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// True when `other` lies entirely inside `self`, with `tol` slack on every edge.
    pub fn contains(&self, other: &BoundingBox, tol: f64) -> bool {
        self.x_min <= other.x_min + tol
            && self.y_min <= other.y_min + tol
            && self.x_max >= other.x_max - tol
            && self.y_max >= other.y_max - tol
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Multiplies every coordinate by `factor`. Any positive factor is accepted.
    pub fn scale(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }

    /// Clips to `[0, width] x [0, height]`. Fails if nothing with positive area remains.
    pub fn clip(&self, size: ImageSize) -> Option<Self> {
        let w = size.width as f64;
        let h = size.height as f64;
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
        .ok()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, exactly 1 for identical boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One entry of the augmentation vocabulary with its parameters.
///
/// Only `HorizontalFlip`, `Downsize` and `Rotation` move boxes; the others are
/// photometric or occluding and leave coordinates untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    Original,
    HorizontalFlip,
    /// One occluding rectangle covering `area_fraction` of the image.
    Cutout { area_fraction: f64 },
    /// Uniform rescale of the whole image by `ratio` in `(0, 1]`.
    Downsize { ratio: f64 },
    /// Rotation about the image center, degrees in `(-180, 180]`, counter-clockwise as displayed.
    Rotation { degrees: f64 },
    GaussianNoise { sigma: f64 },
    SaltPepper { amount: f64 },
}

impl AugmentationSpec {
    pub fn cutout(area_fraction: f64) -> Result<Self, GeometryError> {
        if !(area_fraction > 0.0 && area_fraction < 1.0) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "cutout area fraction must be in (0, 1), got {area_fraction}"
            )));
        }
        Ok(Self::Cutout { area_fraction })
    }

    pub fn downsize(ratio: f64) -> Result<Self, GeometryError> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "downsize ratio must be in (0, 1], got {ratio}"
            )));
        }
        Ok(Self::Downsize { ratio })
    }

    pub fn rotation(degrees: f64) -> Result<Self, GeometryError> {
        if !(degrees > -180.0 && degrees <= 180.0) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "rotation angle must be in (-180, 180], got {degrees}"
            )));
        }
        Ok(Self::Rotation { degrees })
    }

    pub fn gaussian_noise(sigma: f64) -> Result<Self, GeometryError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "gaussian noise sigma must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(Self::GaussianNoise { sigma })
    }

    pub fn salt_pepper(amount: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&amount) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "salt and pepper amount must be in [0, 1], got {amount}"
            )));
        }
        Ok(Self::SaltPepper { amount })
    }

    /// Re-checks parameter bounds, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            Self::Original | Self::HorizontalFlip => Ok(()),
            Self::Cutout { area_fraction } => Self::cutout(area_fraction).map(|_| ()),
            Self::Downsize { ratio } => Self::downsize(ratio).map(|_| ()),
            Self::Rotation { degrees } => Self::rotation(degrees).map(|_| ()),
            Self::GaussianNoise { sigma } => Self::gaussian_noise(sigma).map(|_| ()),
            Self::SaltPepper { amount } => Self::salt_pepper(amount).map(|_| ()),
        }
    }

    /// The single-letter tag used in prediction files (`"original"` for the identity).
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::HorizontalFlip => "F",
            Self::Cutout { .. } => "C",
            Self::Downsize { .. } => "D",
            Self::Rotation { .. } => "R",
            Self::GaussianNoise { .. } => "G",
            Self::SaltPepper { .. } => "S",
        }
    }

    /// Default-parameter augmentation for a tag.
    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "original" => Self::Original,
            "F" => Self::HorizontalFlip,
            "C" => Self::Cutout {
                area_fraction: DEFAULT_CUTOUT_AREA,
            },
            "D" => Self::Downsize {
                ratio: DEFAULT_DOWNSIZE_RATIO,
            },
            "R" => Self::Rotation {
                degrees: DEFAULT_ROTATION_DEGREES,
            },
            "G" => Self::GaussianNoise {
                sigma: DEFAULT_GAUSSIAN_SIGMA,
            },
            "S" => Self::SaltPepper {
                amount: DEFAULT_SALT_PEPPER_AMOUNT,
            },
            _ => return None,
        })
    }

    /// Parses a combination string such as `"FCDR"` into default-parameter specs.
    pub fn parse_combination(letters: &str) -> Result<Vec<Self>, GeometryError> {
        letters
            .chars()
            .map(|c| {
                let tag = c.to_string();
                match Self::from_tag(&tag) {
                    Some(spec) if spec != Self::Original => Ok(spec),
                    _ => Err(GeometryError::InvalidAugmentation(format!(
                        "unknown augmentation letter {c:?}"
                    ))),
                }
            })
            .collect()
    }

    /// The default set: flip, cutout, downsize, rotation.
    pub fn default_set() -> Vec<Self> {
        vec![
            Self::HorizontalFlip,
            Self::Cutout {
                area_fraction: DEFAULT_CUTOUT_AREA,
            },
            Self::Downsize {
                ratio: DEFAULT_DOWNSIZE_RATIO,
            },
            Self::Rotation {
                degrees: DEFAULT_ROTATION_DEGREES,
            },
        ]
    }

    /// Frame size of the augmented image.
    pub fn output_size(&self, size: ImageSize) -> ImageSize {
        match *self {
            Self::Downsize { ratio } => ImageSize {
                width: scaled_dimension(size.width, ratio),
                height: scaled_dimension(size.height, ratio),
            },
            _ => size,
        }
    }

    pub fn moves_boxes(&self) -> bool {
        matches!(
            self,
            Self::HorizontalFlip | Self::Downsize { .. } | Self::Rotation { .. }
        )
    }
}

/// Transports a box from the original frame into the frame of `aug`.
// Rounded up so every scaled in-frame box still fits; the epsilon absorbs
// products like 320 * 0.8 landing a hair above an integer.
fn scaled_dimension(pixels: u32, ratio: f64) -> u32 {
    ((pixels as f64 * ratio - 1e-9).ceil() as u32).max(1)
}

pub fn map_box(
    b: &BoundingBox,
    aug: &AugmentationSpec,
    size: ImageSize,
) -> Result<BoundingBox, GeometryError> {
    match *aug {
        AugmentationSpec::Original
        | AugmentationSpec::Cutout { .. }
        | AugmentationSpec::GaussianNoise { .. }
        | AugmentationSpec::SaltPepper { .. } => Ok(*b),
        AugmentationSpec::HorizontalFlip => {
            let w = size.width as f64;
            BoundingBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max)
                .map_err(|_| GeometryError::MappingDegenerate("horizontal flip"))
        }
        AugmentationSpec::Downsize { ratio } => b
            .scale(ratio)
            .map_err(|_| GeometryError::MappingDegenerate("downsize")),
        AugmentationSpec::Rotation { degrees } => rotate_box(b, degrees, size),
    }
}

fn rotate_box(b: &BoundingBox, degrees: f64, size: ImageSize) -> Result<BoundingBox, GeometryError> {
    if degrees == 0.0 {
        return Ok(*b);
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = 0.5 * size.width as f64;
    let cy = 0.5 * size.height as f64;
    let corners = [
        (b.x_min, b.y_min),
        (b.x_max, b.y_min),
        (b.x_max, b.y_max),
        (b.x_min, b.y_max),
    ];
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let dx = x - cx;
        let dy = y - cy;
        // y points down, so a visually counter-clockwise turn flips the sign on sin.
        let rx = cx + dx * cos + dy * sin;
        let ry = cy - dx * sin + dy * cos;
        lo = (lo.0.min(rx), lo.1.min(ry));
        hi = (hi.0.max(rx), hi.1.max(ry));
    }
    BoundingBox::new(lo.0, lo.1, hi.0, hi.1)
        .ok()
        .and_then(|aabb| aabb.clip(size))
        .ok_or(GeometryError::MappingDegenerate("rotation"))
}

/// Maps reference predictions into an augmented frame, keeping their scores.
///
/// Records whose box degenerates under the mapping are dropped.
pub fn map_predictions(
    preds: &[PredictionRecord],
    aug: &AugmentationSpec,
    size: ImageSize,
) -> Vec<PredictionRecord> {
    preds
        .iter()
        .filter_map(|p| {
            map_box(&p.bbox, aug, size).ok().map(|bbox| PredictionRecord {
                bbox,
                scores: p.scores.clone(),
            })
        })
        .collect()
}
