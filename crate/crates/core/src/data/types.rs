//! Core tracking data types.

use crate::error::{DytxError, Result};

/// Axis-aligned box stored as center + size. Units depend on context:
/// absolute pixels for frame ground truth, [0,1]-normalized for model
/// outputs in search-region coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    /// From top-left corner + size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// GIoU = IoU − (|C| − |A∪B|)/|C| with C the smallest enclosing box.
    pub fn giou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        let cw = ax2.max(bx2) - ax1.min(bx1);
        let ch = ay2.max(by2) - ay1.min(by1);
        let c_area = cw * ch;
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        if c_area <= 0.0 {
            iou
        } else {
            iou - (c_area - union) / c_area
        }
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }

    /// Normalized-coordinate invariants for model outputs.
    pub fn validate_normalized(&self) -> Result<()> {
        let ok = self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(DytxError::Contract(format!("box violates invariants: {self:?}")))
        }
    }
}

/// One video frame: HxWx3 pixels in [0,1] plus ground truth in pixels.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Row-major [H][W][3].
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub gt_box: BoundingBox,
}

impl Frame {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Synthetic attribute tags, an analog of tracking-benchmark attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Occlusion,
    Distractor,
    FastMotion,
    Deformation,
    Clutter,
}

impl Attribute {
    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Occlusion => "occlusion",
            Attribute::Distractor => "distractor",
            Attribute::FastMotion => "fast-motion",
            Attribute::Deformation => "deformation",
            Attribute::Clutter => "clutter",
        }
    }

    pub fn parse(s: &str) -> Option<Attribute> {
        match s {
            "occlusion" => Some(Attribute::Occlusion),
            "distractor" => Some(Attribute::Distractor),
            "fast-motion" => Some(Attribute::FastMotion),
            "deformation" => Some(Attribute::Deformation),
            "clutter" => Some(Attribute::Clutter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// 0 (easiest) to 4 (hardest).
    pub difficulty: u8,
    pub attributes: Vec<Attribute>,
}

/// Template/search crop pair for one training sample.
#[derive(Debug, Clone)]
pub struct SamplePair {
    /// [3, Hz, Wz] in [0,1].
    pub template: crate::Tensor32,
    /// [3, Hx, Wx] in [0,1].
    pub search: crate::Tensor32,
    /// Normalized to the search crop.
    pub target_box: BoundingBox,
}
