use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scene, ViewError, ViewState};
use crate::geom::{box_iou, BBox, BitMask, PointPrompt};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("no positive point in prompt")]
    NoPositive,
    #[error("degenerate box prompt")]
    DegenerateBox,
    #[error(transparent)]
    View(#[from] ViewError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentorConfig {
    /// Width of the band around a region in which boundary pixels may flip.
    pub noise_radius: u32,
    pub noise_seed: u64,
}

/// Point-prompted segmentation. Points are given in view coordinates.
///
/// The first positive point picks the region under it (background gives an
/// empty mask). A negative point inside that region vetoes it. Later positive
/// points do not change the selection.
pub fn segment_points(
    scene: &Scene,
    view: &ViewState,
    points: &[PointPrompt],
    cfg: &SegmentorConfig,
) -> Result<BitMask, PromptError> {
    let mapped = points_to_scene(view, points)?;
    segment_scene_points(scene, &mapped, cfg)
}

/// Maps view-space points into scene space, keeping polarity.
pub fn points_to_scene(view: &ViewState, points: &[PointPrompt]) -> Result<Vec<PointPrompt>, PromptError> {
    points
        .iter()
        .map(|p| {
            let (x, y) = view.to_scene(p.x as i64, p.y as i64)?;
            Ok(PointPrompt {
                x,
                y,
                polarity: p.polarity,
            })
        })
        .collect()
}

/// [`segment_points`] with prompts already in scene coordinates.
pub fn segment_scene_points(
    scene: &Scene,
    points: &[PointPrompt],
    cfg: &SegmentorConfig,
) -> Result<BitMask, PromptError> {
    let (w, h) = (scene.width(), scene.height());
    for p in points {
        if p.x >= w || p.y >= h {
            return Err(ViewError::PointOutside {
                x: p.x as i64,
                y: p.y as i64,
                w,
                h,
            }
            .into());
        }
    }
    let first = points.iter().find(|p| p.is_positive()).ok_or(PromptError::NoPositive)?;
    let id = scene.label(first.x, first.y);
    let Some(region) = scene.region_mask(id) else {
        return Ok(BitMask::empty(w, h));
    };
    if points.iter().any(|p| !p.is_positive() && scene.label(p.x, p.y) == id) {
        return Ok(BitMask::empty(w, h));
    }
    if cfg.noise_radius == 0 {
        return Ok(region.clone());
    }
    Ok(perturb(region, cfg, prompt_digest(points)))
}

/// Box-prompted segmentation. The box is in view coordinates.
///
/// Returns the region whose tight box overlaps the prompt best, lowest id on
/// ties, or an empty mask when nothing overlaps.
pub fn segment_box(scene: &Scene, view: &ViewState, b: [i64; 4], _cfg: &SegmentorConfig) -> Result<BitMask, PromptError> {
    if b[0] >= b[2] || b[1] >= b[3] {
        return Err(PromptError::DegenerateBox);
    }
    let scene_box = view.box_to_scene(b)?;
    Ok(segment_scene_box(scene, scene_box))
}

/// [`segment_box`] with the box already in scene coordinates.
pub fn segment_scene_box(scene: &Scene, b: BBox) -> BitMask {
    let mut best: Option<(u32, f64)> = None;
    for id in scene.region_ids() {
        let v = box_iou(&b, &scene.region_bbox(id).expect("region id in range"));
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((id, v));
        }
    }
    match best {
        Some((id, _)) => scene.region_mask(id).expect("region id in range").clone(),
        None => BitMask::empty(scene.width(), scene.height()),
    }
}

fn prompt_digest(points: &[PointPrompt]) -> u64 {
    let mut h = Sha256::new();
    for p in points {
        h.update(p.x.to_le_bytes());
        h.update(p.y.to_le_bytes());
        h.update([p.is_positive() as u8]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adds a deterministic half of the pixels in the `noise_radius` band around
/// `region`. The result always contains `region` and stays inside its
/// dilation.
fn perturb(region: &BitMask, cfg: &SegmentorConfig, digest: u64) -> BitMask {
    let key = splitmix64(cfg.noise_seed ^ digest.rotate_left(17));
    let dilated = region.dilate(cfg.noise_radius);
    let mut out = region.clone();
    for (x, y) in dilated.pixels() {
        if region.get(x, y) {
            continue;
        }
        let idx = (y as u64) << 32 | x as u64;
        if splitmix64(key ^ idx) & 1 == 1 {
            out.set(x, y, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou;
    use crate::scene::{generate_scene, SceneSpec};

    fn scene() -> Scene {
        generate_scene(
            SceneSpec {
                regions: 3,
                width: 40,
                height: 40,
            },
            3,
        )
        .unwrap()
    }

    fn id_view(s: &Scene) -> ViewState {
        ViewState::identity(s.width(), s.height())
    }

    #[test]
    fn every_interior_point_returns_its_region() {
        let s = scene();
        let cfg = SegmentorConfig::default();
        for id in s.region_ids() {
            let region = s.region_mask(id).unwrap();
            for (x, y) in region.pixels() {
                let m = segment_points(&s, &id_view(&s), &[PointPrompt::positive(x, y)], &cfg).unwrap();
                assert_eq!(&m, region);
            }
        }
    }

    #[test]
    fn background_click_is_empty() {
        let s = scene();
        let (x, y) = (0..s.width())
            .flat_map(|x| (0..s.height()).map(move |y| (x, y)))
            .find(|&(x, y)| s.label(x, y) == 0)
            .unwrap();
        let m = segment_points(&s, &id_view(&s), &[PointPrompt::positive(x, y)], &Default::default()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn negative_inside_vetoes_and_outside_is_ignored() {
        let s = scene();
        let px: Vec<_> = s.region_mask(1).unwrap().pixels().collect();
        let other = s.region_mask(2).unwrap().pixels().next().unwrap();
        let v = id_view(&s);
        let cfg = SegmentorConfig::default();
        let veto = segment_points(
            &s,
            &v,
            &[PointPrompt::positive(px[0].0, px[0].1), PointPrompt::negative(px[1].0, px[1].1)],
            &cfg,
        )
        .unwrap();
        assert!(veto.is_empty());
        let kept = segment_points(
            &s,
            &v,
            &[PointPrompt::positive(px[0].0, px[0].1), PointPrompt::negative(other.0, other.1)],
            &cfg,
        )
        .unwrap();
        assert_eq!(&kept, s.region_mask(1).unwrap());
        // a later positive in another region does not change the selection
        let first_wins = segment_points(
            &s,
            &v,
            &[PointPrompt::positive(px[0].0, px[0].1), PointPrompt::positive(other.0, other.1)],
            &cfg,
        )
        .unwrap();
        assert_eq!(&first_wins, s.region_mask(1).unwrap());
    }

    #[test]
    fn prompt_errors() {
        let s = scene();
        let v = id_view(&s);
        let cfg = SegmentorConfig::default();
        assert_eq!(
            segment_points(&s, &v, &[PointPrompt::negative(1, 1)], &cfg),
            Err(PromptError::NoPositive)
        );
        assert!(matches!(
            segment_points(&s, &v, &[PointPrompt::positive(40, 1)], &cfg),
            Err(PromptError::View(_))
        ));
        assert_eq!(segment_box(&s, &v, [5, 5, 5, 9], &cfg), Err(PromptError::DegenerateBox));
    }

    #[test]
    fn noisy_mask_respects_dilation_bound() {
        let s = scene();
        let cfg = SegmentorConfig {
            noise_radius: 1,
            noise_seed: 99,
        };
        for id in s.region_ids() {
            let region = s.region_mask(id).unwrap();
            let bound = region.area() as f64 / region.dilate(1).area() as f64;
            for (x, y) in region.pixels().step_by(7) {
                let pts = [PointPrompt::positive(x, y)];
                let m = segment_points(&s, &id_view(&s), &pts, &cfg).unwrap();
                assert!(iou(&m, region).unwrap() >= bound);
                assert!(iou(&m, region).unwrap() < 1.0);
                // pure
                assert_eq!(m, segment_points(&s, &id_view(&s), &pts, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn noise_differs_between_prompts() {
        let s = scene();
        let cfg = SegmentorConfig {
            noise_radius: 2,
            noise_seed: 5,
        };
        let px: Vec<_> = s.region_mask(1).unwrap().pixels().collect();
        let a = segment_points(&s, &id_view(&s), &[PointPrompt::positive(px[0].0, px[0].1)], &cfg).unwrap();
        let b = segment_points(&s, &id_view(&s), &[PointPrompt::positive(px[3].0, px[3].1)], &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn box_prompt_picks_best_overlap() {
        let s = scene();
        let v = id_view(&s);
        let cfg = SegmentorConfig::default();
        for id in s.region_ids() {
            let b = s.region_bbox(id).unwrap();
            let m = segment_box(&s, &v, [b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64], &cfg).unwrap();
            assert_eq!(&m, s.region_mask(id).unwrap());
        }
        // exhaustive comparison over random boxes
        for x0 in (0..36).step_by(5) {
            for y0 in (0..36).step_by(5) {
                let b = BBox::new(x0, y0, x0 + 9, y0 + 7);
                let scores: Vec<f64> = s.region_ids().map(|id| box_iou(&b, &s.region_bbox(id).unwrap())).collect();
                let best = scores.iter().cloned().fold(0.0, f64::max);
                let got = segment_scene_box(&s, b);
                if best == 0.0 {
                    assert!(got.is_empty());
                } else {
                    let id = scores.iter().position(|&v| v == best).unwrap() as u32 + 1;
                    assert_eq!(&got, s.region_mask(id).unwrap());
                }
            }
        }
    }

    #[test]
    fn box_far_from_regions_is_empty() {
        let mut labels = vec![0u8; 32 * 32];
        for y in 2..6 {
            for x in 2..6 {
                labels[y * 32 + x] = 1;
            }
        }
        let s = Scene::from_labels(32, 32, 0, labels).unwrap();
        let m = segment_box(&s, &id_view(&s), [20, 20, 30, 30], &Default::default()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn box_prefers_higher_iou_region() {
        // region 1 box [0,0,10,10], region 2 box [11,0,21,10]
        let mut labels = vec![0u8; 32 * 16];
        for y in 0..10 {
            for x in 0..10 {
                labels[y * 32 + x] = 1;
                labels[y * 32 + x + 11] = 2;
            }
        }
        let s = Scene::from_labels(32, 16, 0, labels).unwrap();
        let prompt = BBox::new(4, 0, 16, 10);
        let i1 = box_iou(&prompt, &s.region_bbox(1).unwrap());
        let i2 = box_iou(&prompt, &s.region_bbox(2).unwrap());
        assert!(i1 > i2 && i2 > 0.0);
        assert_eq!(&segment_scene_box(&s, prompt), s.region_mask(1).unwrap());
    }

    #[test]
    fn rotated_view_points_map_to_scene() {
        let s = scene();
        let v = id_view(&s).rotate(90).unwrap();
        let (sx, sy) = s.region_mask(2).unwrap().pixels().next().unwrap();
        let (vx, vy) = v.to_view(sx, sy).unwrap();
        let m = segment_points(&s, &v, &[PointPrompt::positive(vx, vy)], &Default::default()).unwrap();
        assert_eq!(&m, s.region_mask(2).unwrap());
    }
}
