//! Axis-aligned box arithmetic and the dual (recall + precision) IoU reward.
//!
//! All coordinates are absolute pixels. Boxes are validated on construction,
//! so every `BBox` in circulation has finite coordinates and strictly
//! positive area.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinate is not finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("degenerate box {0:?}: requires x1 < x2 and y1 < y2")]
    Degenerate([f64; 4]),
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    BadDims { width: u32, height: u32 },
    #[error("no ground truth boxes")]
    NoGroundTruth,
}

/// An axis-aligned rectangle `[x1, y1, x2, y2]` in absolute pixels.
///
/// Serializes as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(raw));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::Degenerate(raw));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Overlap area with `other`; zero when the boxes only touch or are apart.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Input resolution of an image, `W x H` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;

    fn try_from(raw: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(raw.width, raw.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::BadDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Which side of a matching a box list plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxRole {
    Prediction,
    GroundTruth,
}

/// An ordered list of boxes tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub role: BoxRole,
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn predictions(boxes: Vec<BBox>) -> Self {
        Self {
            role: BoxRole::Prediction,
            boxes,
        }
    }

    pub fn ground_truth(boxes: Vec<BBox>) -> Self {
        Self {
            role: BoxRole::GroundTruth,
            boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn as_slice(&self) -> &[BBox] {
        &self.boxes
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Best IoU of `target` against any member of `set`; 0 for an empty set.
pub fn max_iou_against(set: &[BBox], target: &BBox) -> f64 {
    set.iter().map(|b| iou(b, target)).fold(0.0, f64::max)
}

/// Recall, precision and their mean for one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualIou {
    pub recall: f64,
    pub precision: f64,
    pub combined: f64,
}

impl DualIou {
    pub const ZERO: DualIou = DualIou {
        recall: 0.0,
        precision: 0.0,
        combined: 0.0,
    };
}

/// Dual IoU between predictions and ground truths.
///
/// Recall averages, over ground truths, the best IoU any prediction achieves
/// on it; precision averages, over predictions, the best IoU against any
/// ground truth. An empty prediction set scores zero on both terms.
pub fn dual_iou_reward(preds: &[BBox], gts: &[BBox]) -> Result<DualIou, GeometryError> {
    if gts.is_empty() {
        return Err(GeometryError::NoGroundTruth);
    }
    if preds.is_empty() {
        return Ok(DualIou::ZERO);
    }
    let recall = gts.iter().map(|g| max_iou_against(preds, g)).sum::<f64>() / gts.len() as f64;
    let precision = preds.iter().map(|p| max_iou_against(gts, p)).sum::<f64>() / preds.len() as f64;
    Ok(DualIou {
        recall,
        precision,
        combined: (recall + precision) / 2.0,
    })
}

/// Box area as a fraction of the image area. No clipping is applied.
pub fn relative_area(b: &BBox, dims: ImageDims) -> f64 {
    b.area() / (f64::from(dims.width) * f64::from(dims.height))
}
