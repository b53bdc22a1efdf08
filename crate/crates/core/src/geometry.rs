//! Boxes, overlap, greedy suppression, anchor generation and evaluation-region
//! membership.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Axis-aligned box in image pixels, stored as top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = GeometryError;

    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        BBox::new(r.x, r.y, r.w, r.h)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { x: b.x, y: b.y, w: b.w, h: b.h }
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::EmptyExtent { w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    /// Box of the given extent centered on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Bit-level identity key, used to deduplicate boxes across mining passes.
    pub fn key(&self) -> [u64; 4] {
        [self.x.to_bits(), self.y.to_bits(), self.w.to_bits(), self.h.to_bits()]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
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

/// A scored proposal; the score is the proposal network's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    score: f64,
}

impl Candidate {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::ScoreRange(score));
        }
        Ok(Candidate { bbox, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Annotated pedestrian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    occlusion: f64,
    truncation: f64,
    pub ignore: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, occlusion: f64, truncation: f64, ignore: bool) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&occlusion) {
            return Err(GeometryError::FractionRange("occlusion", occlusion));
        }
        if !(0.0..=1.0).contains(&truncation) {
            return Err(GeometryError::FractionRange("truncation", truncation));
        }
        Ok(GroundTruthBox { bbox, occlusion, truncation, ignore })
    }

    /// Fully visible, untruncated, evaluated box.
    pub fn visible(bbox: BBox) -> Self {
        GroundTruthBox { bbox, occlusion: 0.0, truncation: 0.0, ignore: false }
    }

    pub fn occlusion(&self) -> f64 {
        self.occlusion
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }
}

/// Classifier output: a box with an unbounded margin score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if !score.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Detection { bbox, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Indices of `scores` ordered by descending score; equal scores keep input order.
pub fn order_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy non-maximum suppression.
///
/// Survivors come back sorted by descending score. A box is dropped when its
/// IoU with an already kept box exceeds `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<Detection> = Vec::new();
    for i in order_by_score_desc(&scores) {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Anchor layout for the pedestrian proposal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Width / height.
    pub ratio: f64,
    /// Anchor heights in pixels, strictly increasing.
    pub scales: Vec<f64>,
    /// Pixels between anchor centers.
    pub stride: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            ratio: 0.41,
            scales: (0..9).map(|k| 40.0 * 1.3f64.powi(k)).collect(),
            stride: 16.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(GeometryError::Config(format!("anchor ratio must be positive, got {}", self.ratio)));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(GeometryError::Config(format!("anchor stride must be positive, got {}", self.stride)));
        }
        if self.scales.is_empty() {
            return Err(GeometryError::Config("anchor scale list is empty".into()));
        }
        if self.scales[0] <= 0.0 || self.scales.windows(2).any(|p| p[1] <= p[0]) {
            return Err(GeometryError::Config("anchor scales must be positive and strictly increasing".into()));
        }
        Ok(())
    }

    pub fn grid_dims(&self, image_w: f64, image_h: f64) -> (usize, usize) {
        ((image_w / self.stride).ceil() as usize, (image_h / self.stride).ceil() as usize)
    }
}

/// One anchor per grid position and scale, centered on the stride grid.
/// Anchors are not clipped to the image.
pub fn generate_anchors(cfg: &AnchorConfig, image_w: f64, image_h: f64) -> Result<Vec<BBox>, GeometryError> {
    cfg.validate()?;
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(GeometryError::Config(format!("image dimensions must be positive, got {image_w}x{image_h}")));
    }
    let (gw, gh) = cfg.grid_dims(image_w, image_h);
    let mut out = Vec::with_capacity(gw * gh * cfg.scales.len());
    for gy in 0..gh {
        let cy = (gy as f64 + 0.5) * cfg.stride;
        for gx in 0..gw {
            let cx = (gx as f64 + 0.5) * cfg.stride;
            for &h in &cfg.scales {
                out.push(BBox::from_center(cx, cy, cfg.ratio * h, h)?);
            }
        }
    }
    Ok(out)
}

/// Closed rectangle of evaluated box centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRegion {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl EvalRegion {
    /// Caltech test images: x in [5, 635], y in [5, 475].
    pub const CALTECH: EvalRegion = EvalRegion { xmin: 5.0, xmax: 635.0, ymin: 5.0, ymax: 475.0 };

    /// The image rectangle shrunk by `margin` on every side.
    pub fn inset(image_w: f64, image_h: f64, margin: f64) -> Self {
        EvalRegion { xmin: margin, xmax: image_w - margin, ymin: margin, ymax: image_h - margin }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax
    }
}

impl Default for EvalRegion {
    fn default() -> Self {
        EvalRegion::CALTECH
    }
}

/// Keep iff the box center lies inside the closed region.
pub fn clip_to_eval_region(b: &BBox, region: &EvalRegion) -> bool {
    let (cx, cy) = b.center();
    cx >= region.xmin && cx <= region.xmax && cy >= region.ymin && cy <= region.ymax
}
