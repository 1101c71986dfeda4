//! Axis-aligned boxes in corner form and the primitives built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`
/// and finite coordinates. Zero-area boxes are allowed.
///
/// Serialized as a `[x1, y1, x2, y2]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "box coordinates must be finite, got [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box has negative extent: [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::invalid(format!(
                "box has negative width or height: [{x}, {y}, {w}, {h}]"
            )));
        }
        Self::new(x, y, x + w, y + h)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

/// Intersection over union. Two zero-area boxes have IoU 0, even when they
/// coincide.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Coordinate-wise weighted mean `sum(w_i * x_i) / sum(w_i)`.
///
/// All weights must be strictly positive and finite, and the two slices must
/// have the same nonzero length.
pub fn weighted_average(boxes: &[BBox], weights: &[f64]) -> Result<BBox> {
    if boxes.is_empty() {
        return Err(Error::invalid("weighted_average of an empty box list"));
    }
    if boxes.len() != weights.len() {
        return Err(Error::invalid(format!(
            "weighted_average got {} boxes but {} weights",
            boxes.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!(
            "weights must be positive and finite, got {w}"
        )));
    }

    let total: f64 = weights.iter().sum();
    let mut acc = [0.0f64; 4];
    for (b, &w) in boxes.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(b.to_array()) {
            *a += w * v;
        }
    }
    let mean = acc.map(|s| s / total);

    // Rounding can push a mean a hair outside the input range (or make
    // x1 > x2 for near-identical inputs); clamp back into the hull.
    let mut out = [0.0f64; 4];
    for k in 0..4 {
        let (lo, hi) = boxes
            .iter()
            .map(|b| b.to_array()[k])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        out[k] = mean[k].clamp(lo, hi);
    }
    if out[0] > out[2] {
        let m = 0.5 * (out[0] + out[2]);
        out[0] = m;
        out[2] = m;
    }
    if out[1] > out[3] {
        let m = 0.5 * (out[1] + out[3]);
        out[1] = m;
        out[3] = m;
    }
    BBox::new(out[0], out[1], out[2], out[3])
}
