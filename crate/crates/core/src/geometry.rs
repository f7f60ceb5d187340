use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle: top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_well_formed(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.x, self.y, self.w, self.h]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Half-open containment: `x <= px < x + w`.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Same size, shifted to lie inside `[0, width) × [0, height)` where
    /// possible.
    pub fn clamped_into(&self, width: f64, height: f64) -> Rect {
        let x = self.x.min(width - self.w).max(0.0);
        let y = self.y.min(height - self.h).max(0.0);
        Rect::new(x, y, self.w.min(width), self.h.min(height))
    }

    pub fn scaled(&self, s: f64) -> Rect {
        Rect::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flipped_x(&self, width: f64) -> Rect {
        Rect::new(width - self.right(), self.y, self.w, self.h)
    }
}

/// Intersection over union; 0 for disjoint or degenerate rectangles.
pub fn jaccard(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}
