//! Axis-aligned box arithmetic.
//!
//! Boxes are real-valued pixel rectangles in `x1, y1, x2, y2` order with the
//! origin at the top-left corner and exclusive max edges. A box on the integer
//! grid `(0, 0, 10, 10)` therefore covers exactly 100 pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rectangle with strictly positive area and finite coordinates.
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
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("non-positive extent"));
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Same-size box moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Intersection with the image frame, or `None` when nothing is left.
    pub fn clamp_to(&self, dims: ImageDims) -> Option<Self> {
        let (w, h) = (dims.width as f64, dims.height as f64);
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        let x2 = self.x2.clamp(0.0, w);
        let y2 = self.y2.clamp(0.0, h);
        (x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn intersection(&self, other: &BBox) -> Option<Self> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    /// Integer pixel rectangle `[x0, x1) x [y0, y1)` covering the box, clipped
    /// to the image. Fractional edges are widened outward.
    pub fn pixel_rect(&self, dims: ImageDims) -> Option<PixelRect> {
        let clamped = self.clamp_to(dims)?;
        let x0 = clamped.x1.floor() as u32;
        let y0 = clamped.y1.floor() as u32;
        let x1 = (clamped.x2.ceil() as u32).min(dims.width);
        let y1 = (clamped.y2.ceil() as u32).min(dims.height);
        (x0 < x1 && y0 < y1).then_some(PixelRect { x0, y0, x1, y1 })
    }

    /// Lexicographic `(x1, y1, x2, y2)` comparison, total over finite values.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
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

/// Half-open integer rectangle in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
        }
    }
}

impl TryFrom<(u32, u32)> for ImageDims {
    type Error = Error;

    fn try_from((w, h): (u32, u32)) -> Result<Self> {
        ImageDims::new(w, h)
    }
}

impl From<ImageDims> for (u32, u32) {
    fn from(d: ImageDims) -> Self {
        (d.width, d.height)
    }
}

/// Intersection-over-union. Boxes that only share an edge score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let inter = inter.area();
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of the image covered by the (clamped) box.
pub fn area_ratio(b: &BBox, dims: ImageDims) -> Result<f64> {
    let clamped = b
        .clamp_to(dims)
        .ok_or_else(|| Error::DegenerateBox(format!("{:?} lies outside {dims:?}", b.to_array())))?;
    Ok(clamped.area() / dims.area())
}

/// Linear magnification gained by zooming the box to full frame: `r^(-1/2)`.
pub fn resolution_gain(b: &BBox, dims: ImageDims) -> Result<f64> {
    Ok(area_ratio(b, dims)?.sqrt().recip())
}

/// Scales the box about its center, then clamps it to the image.
pub fn expand_and_clamp(b: &BBox, scale: f64, dims: ImageDims) -> Result<BBox> {
    if !(scale.is_finite() && scale >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "expansion scale must be >= 1, got {scale}"
        )));
    }
    if b.clamp_to(dims).is_none() {
        return Err(Error::DegenerateBox(format!(
            "{:?} lies outside {dims:?}",
            b.to_array()
        )));
    }
    if scale == 1.0 {
        return b
            .clamp_to(dims)
            .ok_or_else(|| Error::DegenerateBox(format!("{:?} vanished after clamping", b.to_array())));
    }
    let (cx, cy) = b.center();
    let hw = b.width() * scale / 2.0;
    let hh = b.height() * scale / 2.0;
    let expanded = BBox {
        x1: cx - hw,
        y1: cy - hh,
        x2: cx + hw,
        y2: cy + hh,
    };
    expanded
        .clamp_to(dims)
        .ok_or_else(|| Error::DegenerateBox(format!("{:?} vanished after clamping", b.to_array())))
}
