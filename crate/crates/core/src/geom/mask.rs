use serde::{Deserialize, Serialize};

use super::{BBox, GeomError};

/// Binary pixel mask stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BitMask {
    pub fn empty(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::ZeroSize);
        }
        if bits.len() != width as usize * height as usize {
            return Err(GeomError::BitLength {
                expected: width as usize * height as usize,
                got: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    /// Builds a mask from a predicate evaluated at every `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.bits[(y * width + x) as usize] = true;
                }
            }
        }
        m
    }

    /// Sets every pixel inside `b` (clamped to the mask).
    pub fn from_box(width: u32, height: u32, b: BBox) -> Self {
        let b = b.clamp_to(width, height);
        Self::from_fn(width, height, |x, y| b.contains(x, y))
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of bounds");
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BitMask) -> Result<(), GeomError> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(GeomError::Dimension {
                left: self.dims(),
                right: other.dims(),
            })
        }
    }

    /// `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap(&self, other: &BitMask) -> Result<(u64, u64), GeomError> {
        self.same_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as u64;
            union += (a | b) as u64;
        }
        Ok((inter, union))
    }

    pub fn union_with(&mut self, other: &BitMask) -> Result<(), GeomError> {
        self.same_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Tight bounding box of set pixels, or the empty box.
    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..self.height {
            let row = &self.bits[(y * self.width) as usize..((y + 1) * self.width) as usize];
            for (x, _) in row.iter().enumerate().filter(|(_, &b)| b) {
                let x = x as u32;
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
            }
        }
        if x0 == u32::MAX {
            BBox::EMPTY
        } else {
            BBox::new(x0, y0, x1, y1)
        }
    }

    /// Set pixels in raster order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Morphological dilation by `radius` steps of the 4-neighbourhood
    /// (Manhattan ball).
    pub fn dilate(&self, radius: u32) -> BitMask {
        let mut cur = self.clone();
        let (w, h) = (self.width as i64, self.height as i64);
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..h {
                for x in 0..w {
                    if cur.bits[(y * w + x) as usize] {
                        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                            let (nx, ny) = (x + dx, y + dy);
                            if nx >= 0 && ny >= 0 && nx < w && ny < h {
                                next.bits[(ny * w + nx) as usize] = true;
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }
}

/// Serialized form used in logs and scene files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [u32; 2],
    /// Alternating 0-runs and 1-runs over column-major pixel order,
    /// starting with a (possibly zero-length) 0-run.
    pub counts: Vec<u64>,
}

impl From<&BitMask> for RleMask {
    fn from(m: &BitMask) -> Self {
        let (w, h) = (m.width, m.height);
        let mut counts = Vec::new();
        let mut cur = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = m.bits[(y * w + x) as usize];
                if v != cur {
                    counts.push(run);
                    run = 0;
                    cur = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        RleMask {
            size: [h, w],
            counts,
        }
    }
}

impl TryFrom<&RleMask> for BitMask {
    type Error = GeomError;

    fn try_from(rle: &RleMask) -> Result<Self, GeomError> {
        let [h, w] = rle.size;
        let mut m = BitMask::from_bits(w, h, vec![false; w as usize * h as usize])?;
        let n = w as u64 * h as u64;
        let total: u64 = rle.counts.iter().sum();
        if total != n {
            return Err(GeomError::RleLength { expected: n, got: total });
        }
        let mut idx = 0u64;
        let mut v = false;
        for &c in &rle.counts {
            if v {
                for k in idx..idx + c {
                    let (x, y) = ((k / h as u64) as u32, (k % h as u64) as u32);
                    m.bits[(y * w + x) as usize] = true;
                }
            }
            idx += c;
            v = !v;
        }
        Ok(m)
    }
}

impl Serialize for BitMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RleMask::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rle = RleMask::deserialize(d)?;
        BitMask::try_from(&rle).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_layout_is_column_major() {
        // 2x2 with only (1,0) set: column-major order is (0,0),(0,1),(1,0),(1,1)
        let mut m = BitMask::empty(2, 2);
        m.set(1, 0, true);
        let rle = RleMask::from(&m);
        assert_eq!(rle.size, [2, 2]);
        assert_eq!(rle.counts, vec![2, 1, 1]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"size":[2,2],"counts":[2,1,1]}"#);
    }

    #[test]
    fn rle_starting_with_ones_has_leading_zero_run() {
        let m = BitMask::from_fn(3, 1, |x, _| x == 0);
        assert_eq!(RleMask::from(&m).counts, vec![0, 1, 2]);
    }

    #[test]
    fn rle_rejects_wrong_total() {
        let rle = RleMask {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(matches!(
            BitMask::try_from(&rle),
            Err(GeomError::RleLength { .. })
        ));
    }

    #[test]
    fn bbox_of_empty_mask_is_empty() {
        assert!(BitMask::empty(4, 4).bbox().is_empty());
    }

    #[test]
    fn dilate_single_pixel_is_diamond() {
        let mut m = BitMask::empty(5, 5);
        m.set(2, 2, true);
        let d = m.dilate(1);
        assert_eq!(d.area(), 5);
        assert!(d.get(2, 1) && d.get(1, 2) && !d.get(1, 1));
        assert_eq!(m.dilate(2).area(), 13);
    }

    fn arb_mask() -> impl Strategy<Value = BitMask> {
        (1u32..=16, 1u32..=16).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| BitMask::from_bits(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rle_round_trip_is_bit_exact(m in arb_mask()) {
            let json = serde_json::to_string(&m).unwrap();
            let back: BitMask = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
