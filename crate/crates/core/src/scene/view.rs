use serde::{Deserialize, Serialize};

use crate::geom::BBox;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ViewError {
    #[error("point ({x},{y}) lies outside the {w}x{h} view")]
    PointOutside { x: i64, y: i64, w: u32, h: u32 },
    #[error("scene point ({x},{y}) is not visible in the current view")]
    NotVisible { x: u32, y: u32 },
    #[error("box {0:?} is empty or exceeds the view")]
    BadBox([i64; 4]),
    #[error("rotation of {0} degrees is not a right angle")]
    BadAngle(i64),
}

/// Clockwise rotation by a right angle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_degrees(deg: i64) -> Result<Self, ViewError> {
        match deg.rem_euclid(360) {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            _ => Err(ViewError::BadAngle(deg)),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn then(self, other: Rotation) -> Rotation {
        Rotation::from_degrees((self.degrees() + other.degrees()) as i64).expect("right angle sum")
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = i64::deserialize(d)?;
        Rotation::from_degrees(deg).map_err(serde::de::Error::custom)
    }
}

/// What the policy currently sees: a crop of the scene, rotated clockwise.
///
/// Nothing is resampled; the transform is kept symbolic and every lookup goes
/// through [`ViewState::to_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewState {
    pub crop: BBox,
    pub rotation: Rotation,
}

impl ViewState {
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            crop: BBox::full(width, height),
            rotation: Rotation::R0,
        }
    }

    /// `(width, height)` of the view in view pixels.
    pub fn dims(&self) -> (u32, u32) {
        let (cw, ch) = (self.crop.width(), self.crop.height());
        match self.rotation {
            Rotation::R0 | Rotation::R180 => (cw, ch),
            Rotation::R90 | Rotation::R270 => (ch, cw),
        }
    }

    /// View pixel → scene pixel.
    pub fn to_scene(&self, x: i64, y: i64) -> Result<(u32, u32), ViewError> {
        let (w, h) = self.dims();
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Err(ViewError::PointOutside { x, y, w, h });
        }
        let (u, v) = (x as u32, y as u32);
        let (cw, ch) = (self.crop.width(), self.crop.height());
        let (lx, ly) = match self.rotation {
            Rotation::R0 => (u, v),
            Rotation::R90 => (v, ch - 1 - u),
            Rotation::R180 => (cw - 1 - u, ch - 1 - v),
            Rotation::R270 => (cw - 1 - v, u),
        };
        Ok((self.crop.x0 + lx, self.crop.y0 + ly))
    }

    /// Scene pixel → view pixel; fails when the pixel is outside the crop.
    pub fn to_view(&self, x: u32, y: u32) -> Result<(u32, u32), ViewError> {
        if !self.crop.contains(x, y) {
            return Err(ViewError::NotVisible { x, y });
        }
        let (lx, ly) = (x - self.crop.x0, y - self.crop.y0);
        let (cw, ch) = (self.crop.width(), self.crop.height());
        Ok(match self.rotation {
            Rotation::R0 => (lx, ly),
            Rotation::R90 => (ch - 1 - ly, lx),
            Rotation::R180 => (cw - 1 - lx, ch - 1 - ly),
            Rotation::R270 => (ly, cw - 1 - lx),
        })
    }

    /// Maps a view-space box (exclusive far corner) to its scene-space
    /// preimage. The box must be non-empty and lie inside the view.
    pub fn box_to_scene(&self, b: [i64; 4]) -> Result<BBox, ViewError> {
        let [x0, y0, x1, y1] = b;
        let (w, h) = self.dims();
        if x0 < 0 || y0 < 0 || x0 >= x1 || y0 >= y1 || x1 > w as i64 || y1 > h as i64 {
            return Err(ViewError::BadBox(b));
        }
        let (ax, ay) = self.to_scene(x0, y0)?;
        let (bx, by) = self.to_scene(x1 - 1, y1 - 1)?;
        Ok(BBox::new(ax.min(bx), ay.min(by), ax.max(bx) + 1, ay.max(by) + 1))
    }

    /// Scene box → view box. The box must lie inside the crop.
    pub fn box_to_view(&self, b: BBox) -> Result<BBox, ViewError> {
        if !b.within(&self.crop) {
            return Err(ViewError::BadBox([b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64]));
        }
        let (ax, ay) = self.to_view(b.x0, b.y0)?;
        let (bx, by) = self.to_view(b.x1 - 1, b.y1 - 1)?;
        Ok(BBox::new(ax.min(bx), ay.min(by), ax.max(bx) + 1, ay.max(by) + 1))
    }

    /// Narrows the view to `b` (in view coordinates); rotation is kept.
    pub fn zoom(&self, b: [i64; 4]) -> Result<ViewState, ViewError> {
        Ok(ViewState {
            crop: self.box_to_scene(b)?,
            rotation: self.rotation,
        })
    }

    /// Adds a clockwise rotation of `degrees` (a multiple of 90).
    pub fn rotate(&self, degrees: i64) -> Result<ViewState, ViewError> {
        let r = Rotation::from_degrees(degrees)?;
        Ok(ViewState {
            crop: self.crop,
            rotation: self.rotation.then(r),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rotates a row-major grid 90° clockwise by explicit index shuffling.
    fn rotate_grid_cw(grid: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let h = grid.len();
        let w = grid[0].len();
        (0..w)
            .map(|c| (0..h).rev().map(|r| grid[r][c]).collect())
            .collect()
    }

    fn indicator(crop: BBox, scene_w: u32) -> Vec<Vec<u32>> {
        (crop.y0..crop.y1)
            .map(|y| (crop.x0..crop.x1).map(|x| y * scene_w + x).collect())
            .collect()
    }

    #[test]
    fn identity_view_maps_to_itself() {
        let v = ViewState::identity(20, 10);
        assert_eq!(v.to_scene(7, 3).unwrap(), (7, 3));
        assert_eq!(v.dims(), (20, 10));
    }

    #[test]
    fn crop_offset() {
        let v = ViewState::identity(32, 32).zoom([10, 10, 20, 20]).unwrap();
        assert_eq!(v.to_scene(0, 0).unwrap(), (10, 10));
        assert_eq!(v.to_scene(9, 9).unwrap(), (19, 19));
        assert!(v.to_scene(10, 0).is_err());
    }

    #[test]
    fn rotations_match_grid_oracle() {
        let scene_w = 13;
        let crop = BBox::new(2, 3, 9, 7);
        let mut grid = indicator(crop, scene_w);
        for quarter in 0..4 {
            let view = ViewState {
                crop,
                rotation: Rotation::from_degrees(90 * quarter).unwrap(),
            };
            assert_eq!(view.dims(), (grid[0].len() as u32, grid.len() as u32));
            for (vy, row) in grid.iter().enumerate() {
                for (vx, &idx) in row.iter().enumerate() {
                    let (sx, sy) = view.to_scene(vx as i64, vy as i64).unwrap();
                    assert_eq!(sy * scene_w + sx, idx, "rot {} at ({vx},{vy})", 90 * quarter);
                    assert_eq!(view.to_view(sx, sy).unwrap(), (vx as u32, vy as u32));
                }
            }
            grid = rotate_grid_cw(&grid);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let v = ViewState::identity(16, 9);
        let mut r = v;
        for _ in 0..4 {
            r = r.rotate(90).unwrap();
        }
        assert_eq!(r, v);
        assert_eq!(v.rotate(-90).unwrap().rotation, Rotation::R270);
    }

    #[test]
    fn non_right_angles_rejected() {
        let v = ViewState::identity(16, 16);
        assert_eq!(v.rotate(45), Err(ViewError::BadAngle(45)));
    }

    #[test]
    fn rotated_zoom_maps_box_back() {
        let v = ViewState::identity(40, 30).rotate(90).unwrap();
        // view is 30 wide, 40 tall
        let z = v.zoom([0, 0, 10, 5]).unwrap();
        assert_eq!(z.crop, v.box_to_scene([0, 0, 10, 5]).unwrap());
        assert_eq!(z.dims(), (10, 5));
        assert_eq!(v.box_to_view(z.crop).unwrap(), BBox::new(0, 0, 10, 5));
    }

    proptest! {
        #[test]
        fn view_mapping_is_bijective(
            x0 in 0u32..10, y0 in 0u32..10, w in 1u32..8, h in 1u32..8, q in 0i64..4
        ) {
            let view = ViewState { crop: BBox::new(x0, y0, x0 + w, y0 + h), rotation: Rotation::from_degrees(q * 90).unwrap() };
            let (vw, vh) = view.dims();
            let mut seen = std::collections::HashSet::new();
            for vy in 0..vh {
                for vx in 0..vw {
                    let s = view.to_scene(vx as i64, vy as i64).unwrap();
                    prop_assert!(view.crop.contains(s.0, s.1));
                    prop_assert!(seen.insert(s));
                    prop_assert_eq!(view.to_view(s.0, s.1).unwrap(), (vx, vy));
                }
            }
            prop_assert_eq!(seen.len() as u64, view.crop.area());
        }
    }
}
