//! Box arithmetic, occlusion validity, Gaussian scoring and closed-form
//! recovery of an occluded box from its occluder and occlusion center.
//!
//! Boxes are continuous, half-open rectangles in image coordinates with `y`
//! growing downward. Width is `x_r - x_l` with no `+1` pixel convention.

use crate::error::{Error, Result};

/// Default overlap ratio above which two boxes form a valid occlusion.
pub const DEFAULT_OCCLUSION_TAU: f64 = 0.7;

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_l: f64,
    pub y_t: f64,
    pub x_r: f64,
    pub y_b: f64,
}

/// A point in pixel (or heatmap-cell) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x_l: f64, y_t: f64, x_r: f64, y_b: f64) -> Result<Self> {
        let b = Self { x_l, y_t, x_r, y_b };
        if !(x_l.is_finite() && y_t.is_finite() && x_r.is_finite() && y_b.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite corner in {b:?}")));
        }
        if x_l > x_r || y_t > y_b {
            return Err(Error::InvalidBox(format!("inverted corners in {b:?}")));
        }
        Ok(b)
    }

    /// Builds a box from top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    /// Builds a box from its center and size.
    pub fn from_center(center: Point2, w: f64, h: f64) -> Result<Self> {
        Self::new(
            center.x - w / 2.0,
            center.y - h / 2.0,
            center.x + w / 2.0,
            center.y + h / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_r - self.x_l
    }

    pub fn height(&self) -> f64 {
        self.y_b - self.y_t
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.x_l + self.x_r) / 2.0, (self.y_t + self.y_b) / 2.0)
    }

    /// Overlap region of two boxes, or `None` unless it has positive extent
    /// on both axes.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x_l = self.x_l.max(other.x_l);
        let y_t = self.y_t.max(other.y_t);
        let x_r = self.x_r.min(other.x_r);
        let y_b = self.y_b.min(other.y_b);
        if x_r > x_l && y_b > y_t {
            Some(BBox { x_l, y_t, x_r, y_b })
        } else {
            None
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersect(other).map_or(0.0, |o| o.area());
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Half-open containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_l && p.x < self.x_r && p.y >= self.y_t && p.y < self.y_b
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_l: self.x_l + dx,
            y_t: self.y_t + dy,
            x_r: self.x_r + dx,
            y_b: self.y_b + dy,
        }
    }

    /// Largest coordinate difference against another box.
    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        (self.x_l - other.x_l)
            .abs()
            .max((self.y_t - other.y_t).abs())
            .max((self.x_r - other.x_r).abs())
            .max((self.y_b - other.y_b).abs())
    }
}

/// Coordinate-wise intersection of two boxes.
pub fn intersect(a: &BBox, b: &BBox) -> Option<BBox> {
    a.intersect(b)
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// A valid occlusion between two objects of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionEvent {
    pub region: BBox,
    pub center: Point2,
    pub source_pair: (usize, usize),
}

/// Overlap ratio `A(o) / min(A(a), A(b))`, or `None` when the boxes are
/// disjoint or the smaller one is degenerate.
pub fn occlusion_ratio(a: &BBox, b: &BBox) -> Option<(BBox, f64)> {
    let region = a.intersect(b)?;
    let denom = a.area().min(b.area());
    if denom <= 0.0 {
        return None;
    }
    Some((region, region.area() / denom))
}

/// Returns the occlusion event when the overlap covers strictly more than
/// `tau` of the smaller box. `source_pair` is left as `(0, 1)`; see
/// [`occlusion_events`] for indexed enumeration.
pub fn occlusion_valid(a: &BBox, b: &BBox, tau: f64) -> Option<OcclusionEvent> {
    let (region, ratio) = occlusion_ratio(a, b)?;
    if ratio > tau {
        Some(OcclusionEvent {
            region,
            center: region.center(),
            source_pair: (0, 1),
        })
    } else {
        None
    }
}

/// All valid occlusions among `boxes`, over unordered pairs `i < j`.
pub fn occlusion_events(boxes: &[BBox], tau: f64) -> Vec<OcclusionEvent> {
    let mut events = Vec::new();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if let Some(mut ev) = occlusion_valid(&boxes[i], &boxes[j], tau) {
                ev.source_pair = (i, j);
                events.push(ev);
            }
        }
    }
    events
}

/// Kernel width rule for occlusion heatmaps.
///
/// The radius `r` (in heatmap cells) is the largest diagonal shift after
/// which a copy of the overlap region still has IoU >= `min_iou` with the
/// original; `sigma = max(r / 3, min_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaRule {
    pub min_iou: f64,
    pub min_sigma: f64,
}

impl Default for SigmaRule {
    fn default() -> Self {
        Self {
            min_iou: 0.7,
            min_sigma: 1.0,
        }
    }
}

impl SigmaRule {
    /// Shift radius for a `w x h` box (any unit).
    pub fn radius(&self, w: f64, h: f64) -> f64 {
        // (w - r)(h - r) = k where IoU = k / (2wh - k) hits min_iou
        let t = self.min_iou;
        let k = 2.0 * t * w * h / (1.0 + t);
        let s = w + h;
        let disc = (s * s - 4.0 * (w * h - k)).max(0.0);
        ((s - disc.sqrt()) / 2.0).max(0.0)
    }

    pub fn sigma(&self, region: &BBox, stride: f64) -> f64 {
        let r = self.radius(region.width() / stride, region.height() / stride);
        (r / 3.0).max(self.min_sigma)
    }
}

/// Heatmap cell holding a pixel location: `floor(p / stride)`.
pub fn quantize(p: &Point2, stride: f64) -> Point2 {
    Point2::new((p.x / stride).floor(), (p.y / stride).floor())
}

/// Unnormalized 2D Gaussian `exp(-|q - c|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(center: &Point2, query: &Point2, sigma: f64) -> f64 {
    (-center.distance_sq(query) / (2.0 * sigma * sigma)).exp()
}

/// Gaussian score of a heatmap-cell query against the quantized center of
/// an overlap region. `query` is in cell units.
pub fn gaussian_score(region: &BBox, query: &Point2, stride: f64, rule: &SigmaRule) -> f64 {
    let center = quantize(&region.center(), stride);
    gaussian_kernel(&center, query, rule.sigma(region, stride))
}

/// Recovers the leading coordinate of an occluded interval `(a1, a2)` from
/// the occluder interval `(b1, b2)` and the overlap center coordinate `z`.
pub fn recover_coordinate(a1: f64, a2: f64, b1: f64, b2: f64, z: f64) -> f64 {
    let len = a2 - a1;
    match (a1 <= b1, a2 <= b2) {
        (true, true) => 2.0 * z - b1 - len,
        (false, true) => z - len / 2.0,
        (false, false) => 2.0 * z - b2,
        // occluder lies inside the occluded interval on this axis
        (true, false) => a1,
    }
}

/// Box of a lost object, keeping the predicted size and re-anchoring the
/// top-left corner from the occluder box and the occlusion center.
pub fn recover_box(predicted: &BBox, neighbor: &BBox, occ_center: &Point2) -> BBox {
    let x_l = recover_coordinate(
        predicted.x_l,
        predicted.x_r,
        neighbor.x_l,
        neighbor.x_r,
        occ_center.x,
    );
    let y_t = recover_coordinate(
        predicted.y_t,
        predicted.y_b,
        neighbor.y_t,
        neighbor.y_b,
        occ_center.y,
    );
    BBox {
        x_l,
        y_t,
        x_r: x_l + predicted.width(),
        y_b: y_t + predicted.height(),
    }
}
