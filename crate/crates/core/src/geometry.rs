//! Axis-aligned box and point primitives.
//!
//! Coordinates are real-valued pixels in the image frame (origin top-left,
//! y pointing down). Containment is closed on every side, so a point lying
//! exactly on an edge is inside the box.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite and non-negative, got ({0}, {1}, {2}, {3})")]
    InvalidCoordinates(f64, f64, f64, f64),
    #[error("box must have positive extent, got ({0}, {1}, {2}, {3})")]
    Degenerate(f64, f64, f64, f64),
    #[error("point coordinates must be finite, got ({0}, {1})")]
    NonFinitePoint(f64, f64),
}

/// A click location in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub x: f64,
    pub y: f64,
}

impl ClickPoint {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::NonFinitePoint(x, y));
        }
        Ok(Self { x, y })
    }

    /// Euclidean (L2) distance to another point.
    #[inline]
    pub fn distance(&self, other: &ClickPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// True when the point lies in the closed rectangle `[0,width] x [0,height]`.
    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x <= width && self.y <= height
    }
}

/// Free-function form of [`ClickPoint::distance`].
#[inline]
pub fn euclidean_distance(a: &ClickPoint, b: &ClickPoint) -> f64 {
    a.distance(b)
}

/// An axis-aligned bounding box in XYXY pixel coordinates.
///
/// Construction through [`BoundingBox::new`] (and deserialization) enforces
/// `x_min < x_max`, `y_min < y_max`, and finite non-negative coordinates, so
/// every value of this type has strictly positive area.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min < 0.0 || y_min < 0.0 {
            return Err(GeometryError::InvalidCoordinates(x_min, y_min, x_max, y_max));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from a center and full width/height.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> ClickPoint {
        ClickPoint {
            x: (self.x_min + self.x_max) / 2.0,
            y: (self.y_min + self.y_max) / 2.0,
        }
    }

    /// Closed-interval containment test.
    #[inline]
    pub fn contains(&self, p: &ClickPoint) -> bool {
        self.x_min <= p.x && p.x <= self.x_max && self.y_min <= p.y && p.y <= self.y_max
    }

    /// Area of the overlap with `other`; zero when the boxes are disjoint or
    /// only touch along an edge.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// True when `self` lies inside `outer` (edges may coincide).
    pub fn is_inside(&self, outer: &BoundingBox) -> bool {
        self.x_min >= outer.x_min && self.y_min >= outer.y_min && self.x_max <= outer.x_max && self.y_max <= outer.y_max
    }

    /// True when the box lies inside the image rectangle `[0,width] x [0,height]`.
    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Translates by `(-dx, -dy)`; used to move boxes into tile-local frames.
    pub fn shifted(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x_min - dx, self.y_min - dy, self.x_max - dx, self.y_max - dy)
    }

    /// Divides every coordinate by `factor`.
    pub fn scaled_down(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min / factor,
            self.y_min / factor,
            self.x_max / factor,
            self.y_max / factor,
        )
    }

    /// Clips to `[0,width] x [0,height]`; `None` if nothing of positive area remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
        .ok()
    }

    /// Total order used for deterministic tie-breaking: `x_min`, `y_min`,
    /// `x_max`, `y_max`, all ascending.
    pub fn cmp_position(&self, other: &BoundingBox) -> std::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

impl fmt::Debug for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BoundingBox({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

#[inline]
pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

#[inline]
pub fn center(b: &BoundingBox) -> ClickPoint {
    b.center()
}

#[inline]
pub fn contains(b: &BoundingBox, p: &ClickPoint) -> bool {
    b.contains(p)
}

#[inline]
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}
