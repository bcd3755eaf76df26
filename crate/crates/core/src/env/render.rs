use crate::geom::BitMask;
use crate::protocol::ThumbPayload;
use crate::scene::{Scene, ViewState};

/// Region colours cycle through this many palette entries.
pub const PALETTE: u32 = 6;
pub const HIGHLIGHT: u8 = 7;

/// Downscaled overlay of one candidate mask on the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thumbnail {
    pub candidate: usize,
    pub width: u32,
    pub height: u32,
    /// Row-major levels: 0 background, 1..=PALETTE region, HIGHLIGHT mask.
    pub pixels: Vec<u8>,
}

impl Thumbnail {
    pub fn payload(&self) -> ThumbPayload {
        ThumbPayload {
            candidate: self.candidate,
            size: [self.width, self.height],
            pixels: self.pixels.iter().map(|&v| (b'0' + v) as char).collect(),
        }
    }
}

#[inline]
fn level(scene: &Scene, mask: &BitMask, x: u32, y: u32) -> u8 {
    if mask.get(x, y) {
        HIGHLIGHT
    } else {
        match scene.label(x, y) {
            0 => 0,
            id => (1 + (id - 1) % PALETTE) as u8,
        }
    }
}

/// Nearest-neighbour source index for output pixel `i` when resampling
/// `src` pixels onto `dst`.
#[inline]
pub fn nearest(i: u32, src: u32, dst: u32) -> u32 {
    (((2 * i as u64 + 1) * src as u64) / (2 * dst as u64)) as u32
}

/// Renders `mask` over `scene` into a `size × size` thumbnail.
pub fn render_overlay(scene: &Scene, mask: &BitMask, size: u32, candidate: usize) -> Thumbnail {
    assert_eq!(mask.dims(), (scene.width(), scene.height()), "mask must match scene");
    let (w, h) = (scene.width(), scene.height());
    let mut pixels = Vec::with_capacity((size * size) as usize);
    for ty in 0..size {
        let sy = nearest(ty, h, size);
        for tx in 0..size {
            pixels.push(level(scene, mask, nearest(tx, w, size), sy));
        }
    }
    Thumbnail {
        candidate,
        width: size,
        height: size,
        pixels,
    }
}

/// Region ids of the current view as base-36 digits, row-major.
pub fn render_view(scene: &Scene, view: &ViewState) -> String {
    let (w, h) = view.dims();
    let mut s = String::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = view.to_scene(x as i64, y as i64).expect("view pixel in range");
            s.push(char::from_digit(scene.label(sx, sy), 36).expect("region id below 36"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn scene(w: u32, h: u32) -> Scene {
        generate_scene(
            SceneSpec {
                regions: 2,
                width: w,
                height: h,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn identity_size_is_lossless() {
        let s = scene(32, 32);
        let m = s.region_mask(1).unwrap().clone();
        let t = render_overlay(&s, &m, 32, 0);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(t.pixels[(y * 32 + x) as usize], level(&s, &m, x, y));
            }
        }
    }

    #[test]
    fn solid_mask_downscales_to_solid() {
        let s = scene(32, 32);
        let full = BitMask::from_fn(32, 32, |_, _| true);
        let t = render_overlay(&s, &full, 16, 3);
        assert!(t.pixels.iter().all(|&v| v == HIGHLIGHT));
        assert_eq!(t.candidate, 3);
    }

    #[test]
    fn checkerboard_matches_index_oracle() {
        let s = scene(32, 32);
        let cb = BitMask::from_fn(32, 32, |x, y| (x + y) % 2 == 0);
        let t = render_overlay(&s, &cb, 12, 0);
        for ty in 0..12u32 {
            for tx in 0..12u32 {
                // centre of output pixel mapped back through the scale factor
                let sx = ((tx as f64 + 0.5) * 32.0 / 12.0).floor() as u32;
                let sy = ((ty as f64 + 0.5) * 32.0 / 12.0).floor() as u32;
                let want = if (sx + sy).is_multiple_of(2) { HIGHLIGHT } else { level(&s, &cb, sx, sy) };
                assert_eq!(t.pixels[(ty * 12 + tx) as usize], want);
            }
        }
    }

    #[test]
    fn view_render_follows_rotation() {
        let s = scene(40, 20);
        let v = ViewState::identity(40, 20).rotate(90).unwrap();
        let img = render_view(&s, &v);
        assert_eq!(img.len(), 800);
        let (sx, sy) = s.region_mask(1).unwrap().pixels().next().unwrap();
        let (vx, vy) = v.to_view(sx, sy).unwrap();
        assert_eq!(img.as_bytes()[(vy * 20 + vx) as usize], b'1');
    }
}
