//! Axis-aligned boxes, IoU, and the center/log-size box parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to log-size deltas when decoding network outputs.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Corner-form box in pixels; area is `(x2 − x1)·(y2 − y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box { x1, y1, x2, y2 }
    }

    /// Box with validated geometry.
    pub fn checked(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box::new(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidBox(format!("{:?}", self)));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &Box) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Box {
        Box::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_slice(v: &[f64]) -> Box {
        Box::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression target that moves `anchor` onto `gt`.
pub fn encode_box(gt: &Box, anchor: &Box) -> Result<[f64; 4]> {
    gt.validate()?;
    anchor.validate()?;
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(delta: &[f64; 4], anchor: &Box) -> Result<Box> {
    anchor.validate()?;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let out = Box::from_center(
        acx + delta[0] * aw,
        acy + delta[1] * ah,
        delta[2].exp() * aw,
        delta[3].exp() * ah,
    );
    out.validate()?;
    Ok(out)
}

/// Decode with log-size deltas clamped to [`MAX_LOG_SCALE`]; used on raw
/// network outputs, where an untrained head can emit huge values.
pub fn decode_box_clamped(delta: &[f64; 4], anchor: &Box) -> Box {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Box::from_center(
        acx + delta[0] * aw,
        acy + delta[1] * ah,
        delta[2].min(MAX_LOG_SCALE).exp() * aw,
        delta[3].min(MAX_LOG_SCALE).exp() * ah,
    )
}
