use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, top-left convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite() && self.w > 0.0 && self.h > 0.0
    }

    /// Returns an error unless the box has finite coordinates and positive extent.
    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Box(format!("degenerate box {self:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    /// Maps the box through an axis-aligned affine transform `p' = (p - offset) * scale`.
    pub fn transform(&self, offset: (f64, f64), scale: (f64, f64)) -> BBox {
        BBox::new(
            (self.x - offset.0) * scale.0,
            (self.y - offset.1) * scale.1,
            self.w * scale.0,
            self.h * scale.1,
        )
    }

    /// Inverse of [`BBox::transform`].
    pub fn untransform(&self, offset: (f64, f64), scale: (f64, f64)) -> BBox {
        BBox::new(
            self.x / scale.0 + offset.0,
            self.y / scale.1 + offset.1,
            self.w / scale.0,
            self.h / scale.1,
        )
    }

    /// Clamps the box into a `width` x `height` image, keeping at least one pixel of extent.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let w = self.w.clamp(1.0, width);
        let h = self.h.clamp(1.0, height);
        let x = self.x.clamp(0.0, width - w);
        let y = self.y.clamp(0.0, height - h);
        BBox::new(x, y, w, h)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Euclidean distance between box centers, in pixels.
pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        let v = iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        let a = BBox::new(0.0, 0.0, 0.0, 2.0);
        assert!(matches!(iou(&a, &a), Err(Error::Box(_))));
    }

    #[test]
    fn center_error_345() {
        let a = BBox::from_center(2.0, 2.0, 2.0, 2.0);
        let b = BBox::from_center(5.0, 6.0, 4.0, 1.0);
        assert_eq!(center_error(&a, &a), 0.0);
        assert!((center_error(&a, &b) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_keeps_inside() {
        let b = BBox::new(-5.0, 90.0, 20.0, 20.0).clamp_to(100.0, 100.0);
        assert_eq!(b, BBox::new(0.0, 80.0, 20.0, 20.0));
    }
}
