use serde::{Deserialize, Serialize};

/// Axis-aligned box: top-left corner `(x, y)` and extents `(w, h)` in pixels.
/// Covers the half-open pixel range `[x, x+w) × [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.x, self.y, self.w, self.h]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x1() <= width as f64 && self.y1() <= height as f64
    }

    /// Intersection with the image rectangle `[0, width) × [0, height)`.
    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = self.x1().clamp(0.0, width as f64);
        let y1 = self.y1().clamp(0.0, height as f64);
        BBox::from_corners(x0, y0, x1.max(x0), y1.max(y0))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x.max(other.x)).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    /// Integer pixel bounds `(x0, y0, x1, y1)`, half-open, for integer-aligned boxes.
    pub fn pixel_bounds(&self) -> (usize, usize, usize, usize) {
        (
            self.x.max(0.0).floor() as usize,
            self.y.max(0.0).floor() as usize,
            self.x1().max(0.0).ceil() as usize,
            self.y1().max(0.0).ceil() as usize,
        )
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_and_bounds() {
        let b = BBox::new(-2.0, 3.0, 10.0, 10.0).clip(6, 8);
        assert_eq!(b, BBox::new(0.0, 3.0, 6.0, 5.0));
        assert_eq!(BBox::new(1.0, 2.0, 3.0, 4.0).pixel_bounds(), (1, 2, 4, 6));
        assert!(BBox::new(0.0, 0.0, 6.0, 8.0).within(6, 8));
        assert!(!BBox::new(0.5, 0.0, 6.0, 8.0).within(6, 8));
    }
}
