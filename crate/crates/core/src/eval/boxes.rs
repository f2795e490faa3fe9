//! Normalized center-format boxes and overlap measures.

use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn contains(self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.to_xyxy();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    pub fn validate(self) -> Result<Self> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(DcaError::InvalidBox(format!("{self:?}")));
        }
        Ok(self)
    }
}

/// Intersection-over-union. Fails on non-positive extents.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. Lies in (−1, 1].
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(giou_unchecked(a, b))
}

fn inter_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the corner form so that identical boxes give IoU exactly 1.
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    (inter, area_a + area_b - inter)
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub(crate) fn giou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let enclose = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclose <= 0.0 {
        return iou;
    }
    iou - (enclose - union) / enclose
}
