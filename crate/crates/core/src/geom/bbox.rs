use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box, `[x0, y0)` inclusive to `[x1, y1)` exclusive.
///
/// Any box with `x0 >= x1` or `y0 >= y1` is empty; [`BBox::EMPTY`] is the
/// canonical empty value and every constructor normalizes to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u32; 4]) -> Self {
        BBox::new(x0, y0, x1, y1)
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        if x0 >= x1 || y0 >= y1 {
            Self::EMPTY
        } else {
            Self { x0, y0, x1, y1 }
        }
    }

    /// The whole `width × height` frame.
    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            self.width() as u64 * self.height() as u64
        }
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersect(&self, other: &BBox) -> BBox {
        if self.is_empty() || other.is_empty() {
            return Self::EMPTY;
        }
        BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    /// Smallest box enclosing both; empty boxes are the identity.
    pub fn hull(&self, other: &BBox) -> BBox {
        match (self.is_empty(), other.is_empty()) {
            (true, _) => *other,
            (_, true) => *self,
            _ => BBox::new(
                self.x0.min(other.x0),
                self.y0.min(other.y0),
                self.x1.max(other.x1),
                self.y1.max(other.y1),
            ),
        }
    }

    /// True when `self` lies entirely within `outer`.
    pub fn within(&self, outer: &BBox) -> bool {
        !self.is_empty()
            && self.x0 >= outer.x0
            && self.y0 >= outer.y0
            && self.x1 <= outer.x1
            && self.y1 <= outer.y1
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> BBox {
        self.intersect(&BBox::full(width, height))
    }
}

/// Area-overlap ratio of two boxes; 0 when either is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(1, 1, 5, 4);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(10, 10, 12, 12)), 0.0);
    }

    #[test]
    fn diagonal_offset_boxes() {
        // intersection 1, union 4 + 4 - 1 = 7
        let v = box_iou(&BBox::new(0, 0, 2, 2), &BBox::new(1, 1, 3, 3));
        assert_eq!(v, 1.0 / 7.0);
    }

    #[test]
    fn empty_box_scores_zero() {
        let a = BBox::new(0, 0, 2, 2);
        assert_eq!(box_iou(&a, &BBox::EMPTY), 0.0);
        assert_eq!(box_iou(&BBox::EMPTY, &BBox::EMPTY), 0.0);
    }

    #[test]
    fn degenerate_normalizes_to_empty() {
        assert_eq!(BBox::new(3, 0, 3, 5), BBox::EMPTY);
        let b: BBox = serde_json::from_str("[5,5,2,9]").unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn hull_ignores_empty() {
        let a = BBox::new(0, 0, 1, 1);
        assert_eq!(a.hull(&BBox::EMPTY), a);
        assert_eq!(a.hull(&BBox::new(3, 3, 4, 4)), BBox::new(0, 0, 4, 4));
    }
}
