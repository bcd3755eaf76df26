//! Synthetic labelled scenes and a deterministic promptable segmentor.
//!
//! A scene is a grid of region ids (0 is background). Each region is a filled
//! rectangle or ellipse, 4-connected, with a one-pixel gap between region
//! bounding boxes.

mod segmentor;
mod view;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{connected_components, BBox, BitMask, Connectivity, RleMask};

pub use segmentor::{
    points_to_scene, segment_box, segment_points, segment_scene_box, segment_scene_points, PromptError,
    SegmentorConfig, splitmix64,
};
pub use view::{Rotation, ViewError, ViewState};

/// Region ids are rendered as single base-36 digits on the wire.
pub const MAX_REGIONS: usize = 35;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not pack {regions} regions into {width}x{height} (seed {seed})")]
    Packing {
        regions: usize,
        width: u32,
        height: u32,
        seed: u64,
    },
    #[error("scene file violates invariant: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub regions: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            regions: 4,
            width: 64,
            height: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let (k, w, h) = (self.regions, self.width, self.height);
        if k == 0 || k > MAX_REGIONS {
            return Err(SceneError::Spec(format!("region count {k} outside 1..={MAX_REGIONS}")));
        }
        if w < 16 || h < 16 {
            return Err(SceneError::Spec(format!("scene {w}x{h} smaller than 16x16")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Region {
    mask: BitMask,
    bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    width: u32,
    height: u32,
    seed: u64,
    labels: Vec<u8>,
    regions: Vec<Region>,
}

impl Scene {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn region_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.regions.len() as u32
    }

    #[inline]
    pub fn label(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize] as u32
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Mask of region `id` (1-based).
    pub fn region_mask(&self, id: u32) -> Option<&BitMask> {
        self.region(id).map(|r| &r.mask)
    }

    pub fn region_bbox(&self, id: u32) -> Option<BBox> {
        self.region(id).map(|r| r.bbox)
    }

    fn region(&self, id: u32) -> Option<&Region> {
        id.checked_sub(1).and_then(|i| self.regions.get(i as usize))
    }

    /// Builds a scene from a label grid and checks every invariant.
    pub fn from_labels(width: u32, height: u32, seed: u64, labels: Vec<u8>) -> Result<Self, SceneError> {
        if width == 0 || height == 0 || labels.len() != width as usize * height as usize {
            return Err(SceneError::Invalid("label grid does not match dimensions".into()));
        }
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        if k > MAX_REGIONS {
            return Err(SceneError::Invalid(format!("{k} regions exceeds {MAX_REGIONS}")));
        }
        let mut regions = Vec::with_capacity(k);
        for id in 1..=k as u8 {
            let mask = BitMask::from_bits(width, height, labels.iter().map(|&l| l == id).collect())
                .map_err(|e| SceneError::Invalid(e.to_string()))?;
            if mask.is_empty() {
                return Err(SceneError::Invalid(format!("region {id} is empty")));
            }
            if connected_components(&mask, Connectivity::Four).len() != 1 {
                return Err(SceneError::Invalid(format!("region {id} is not 4-connected")));
            }
            let bbox = mask.bbox();
            regions.push(Region { mask, bbox });
        }
        Ok(Self {
            width,
            height,
            seed,
            labels,
            regions,
        })
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            w: self.width,
            h: self.height,
            seed: self.seed,
            labels_rle: self.regions.iter().map(|r| RleMask::from(&r.mask)).collect(),
        }
    }

    pub fn from_file(f: &SceneFile) -> Result<Self, SceneError> {
        let (w, h) = (f.w, f.h);
        if w == 0 || h == 0 {
            return Err(SceneError::Invalid("zero-sized scene".into()));
        }
        if f.labels_rle.len() > MAX_REGIONS {
            return Err(SceneError::Invalid("too many regions".into()));
        }
        let mut labels = vec![0u8; w as usize * h as usize];
        for (i, rle) in f.labels_rle.iter().enumerate() {
            let m = BitMask::try_from(rle).map_err(|e| SceneError::Invalid(e.to_string()))?;
            if m.dims() != (w, h) {
                return Err(SceneError::Invalid(format!("region {} has wrong size", i + 1)));
            }
            for (slot, &b) in labels.iter_mut().zip(m.bits()) {
                if b {
                    if *slot != 0 {
                        return Err(SceneError::Invalid(format!(
                            "regions {} and {} overlap",
                            slot,
                            i + 1
                        )));
                    }
                    *slot = (i + 1) as u8;
                }
            }
        }
        let scene = Self::from_labels(w, h, f.seed, labels)?;
        if scene.region_count() != f.labels_rle.len() {
            return Err(SceneError::Invalid("trailing empty region".into()));
        }
        Ok(scene)
    }
}

/// On-disk scene: one column-major RLE per region id, in id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFile {
    pub w: u32,
    pub h: u32,
    pub seed: u64,
    pub labels_rle: Vec<RleMask>,
}

const PLACEMENT_ATTEMPTS: usize = 400;
const SCENE_RESTARTS: usize = 16;

/// Deterministically generates a scene of `spec.regions` non-overlapping
/// regions, each covering at least 1% of the frame.
pub fn generate_scene(spec: SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    let SceneSpec {
        regions: k,
        width: w,
        height: h,
    } = spec;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_area = (w as u64 * h as u64).div_ceil(100);
    // an ellipse fills ~pi/4 of its box
    let lo = ((min_area as f64 * 4.0 / std::f64::consts::PI).sqrt().ceil() as u32).max(3);
    let hi = ((w.min(h) as f64 / (k as f64).sqrt() * 0.8) as u32)
        .max(lo)
        .min(w.min(h) - 2);
    if lo > hi {
        return Err(SceneError::Packing {
            regions: k,
            width: w,
            height: h,
            seed,
        });
    }

    'restart: for _ in 0..SCENE_RESTARTS {
        let mut labels = vec![0u8; w as usize * h as usize];
        let mut boxes: Vec<BBox> = Vec::with_capacity(k);
        for id in 1..=k as u8 {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let bw = rng.gen_range(lo..=hi);
                let bh = rng.gen_range(lo..=hi);
                let x0 = rng.gen_range(1..=w - bw - 1);
                let y0 = rng.gen_range(1..=h - bh - 1);
                let b = BBox::new(x0, y0, x0 + bw, y0 + bh);
                let padded = BBox::new(x0 - 1, y0 - 1, x0 + bw + 1, y0 + bh + 1);
                if boxes.iter().any(|o| !padded.intersect(o).is_empty()) {
                    continue;
                }
                let ellipse = rng.gen_bool(0.5);
                let mut area = 0u64;
                let mut pixels = Vec::new();
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        if !ellipse || in_ellipse(&b, x, y) {
                            pixels.push((x, y));
                            area += 1;
                        }
                    }
                }
                if area < min_area {
                    continue;
                }
                for (x, y) in pixels {
                    labels[(y * w + x) as usize] = id;
                }
                boxes.push(b);
                placed = true;
                break;
            }
            if !placed {
                continue 'restart;
            }
        }
        return Scene::from_labels(w, h, seed, labels);
    }
    Err(SceneError::Packing {
        regions: k,
        width: w,
        height: h,
        seed,
    })
}

fn in_ellipse(b: &BBox, x: u32, y: u32) -> bool {
    let (rx, ry) = (b.width() as f64 / 2.0, b.height() as f64 / 2.0);
    let dx = (x as f64 + 0.5 - (b.x0 as f64 + rx)) / rx;
    let dy = (y as f64 + 0.5 - (b.y0 as f64 + ry)) / ry;
    dx * dx + dy * dy <= 1.0
}
