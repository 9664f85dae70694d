//! Box geometry in normalized image coordinates.
//!
//! Every box inside the crate is stored as fractions of the image width and
//! height. Pixel coordinates only appear at the boundaries (VOC files, crops,
//! background sampling) and are converted with [`BoundingBox::from_pixels`]
//! and [`BoundingBox::to_pixels`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): need 0 <= min < max <= 1 on both axes")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("box covers zero pixels on a {width}x{height} image")]
    Degenerate { width: u32, height: u32 },
}

/// Axis-aligned box with coordinates as fractions of the image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let ok = (0.0..=1.0).contains(&x_min)
            && (0.0..=1.0).contains(&y_min)
            && (0.0..=1.0).contains(&x_max)
            && (0.0..=1.0).contains(&y_max)
            && x_min < x_max
            && y_min < y_max;
        if ok {
            Ok(Self { x_min, y_min, x_max, y_max })
        } else {
            Err(GeometryError::InvalidBox { x_min, y_min, x_max, y_max })
        }
    }

    /// The whole frame.
    pub fn full() -> Self {
        Self { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 }
    }

    /// Converts pixel corners (origin top-left, exclusive max) on a
    /// `width`x`height` image.
    pub fn from_pixels(rect: PixelRect, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            f64::from(rect.x0) / f64::from(width),
            f64::from(rect.y0) / f64::from(height),
            f64::from(rect.x1) / f64::from(width),
            f64::from(rect.y1) / f64::from(height),
        )
    }

    /// Nearest-pixel rectangle. Fails when rounding collapses an axis.
    pub fn to_pixels(&self, width: u32, height: u32) -> Result<PixelRect, GeometryError> {
        let w = f64::from(width);
        let h = f64::from(height);
        let rect = PixelRect {
            x0: (self.x_min * w).round() as u32,
            y0: (self.y_min * h).round() as u32,
            x1: (self.x_max * w).round().min(w) as u32,
            y1: (self.y_max * h).round().min(h) as u32,
        };
        if rect.width() == 0 || rect.height() == 0 {
            return Err(GeometryError::Degenerate { width, height });
        }
        Ok(rect)
    }

    /// Smallest pixel rectangle fully covering the box.
    pub fn covering_pixels(&self, width: u32, height: u32) -> PixelRect {
        let w = f64::from(width);
        let h = f64::from(height);
        PixelRect {
            x0: (self.x_min * w).floor() as u32,
            y0: (self.y_min * h).floor() as u32,
            x1: ((self.x_max * w).ceil().min(w)) as u32,
            y1: ((self.y_max * h).ceil().min(h)) as u32,
        }
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

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Total order over (x_min, y_min, x_max, y_max).
    pub fn lexicographic_cmp(&self, other: &BoundingBox) -> Ordering {
        self.as_array()
            .iter()
            .zip(other.as_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.as_array()
    }
}

/// Integer pixel rectangle, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection_area(&self, other: &PixelRect) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        u64::from(w) * u64::from(h)
    }
}
