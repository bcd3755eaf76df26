//! Binary masks, boxes, and the overlap metrics built on them.
//!
//! Every mask is binary. Two empty masks have IoU 1: agreeing on "nothing"
//! is agreement.

mod bbox;
mod components;
mod mask;

pub use bbox::{box_iou, BBox};
pub use components::{connected_components, Connectivity};
pub use mask::{BitMask, RleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A click in some coordinate frame (view or scene, depending on context).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PointPrompt {
    pub x: u32,
    pub y: u32,
    pub polarity: Polarity,
}

impl PointPrompt {
    pub fn positive(x: u32, y: u32) -> Self {
        Self { x, y, polarity: Polarity::Positive }
    }

    pub fn negative(x: u32, y: u32) -> Self {
        Self { x, y, polarity: Polarity::Negative }
    }

    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeomError {
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    Dimension { left: (u32, u32), right: (u32, u32) },
    #[error("mask dimensions must be positive")]
    ZeroSize,
    #[error("bit buffer has {got} entries, expected {expected}")]
    BitLength { expected: usize, got: usize },
    #[error("run lengths sum to {got}, expected {expected}")]
    RleLength { expected: u64, got: u64 },
    #[error("metric over an empty dataset")]
    EmptyDataset,
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64, GeomError> {
    let (inter, union) = a.overlap(b)?;
    Ok(ratio(inter, union))
}

#[inline]
fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixel-wise OR. An empty list yields an empty `width × height` mask.
pub fn union_masks(masks: &[BitMask], width: u32, height: u32) -> Result<BitMask, GeomError> {
    let mut acc = BitMask::empty(width, height);
    for m in masks {
        acc.union_with(m)?;
    }
    Ok(acc)
}

/// Tightest box around all set pixels of all masks.
pub fn union_bbox(masks: &[BitMask]) -> Result<BBox, GeomError> {
    if let Some(first) = masks.first() {
        for m in &masks[1..] {
            first.same_dims(m)?;
        }
    }
    Ok(masks.iter().fold(BBox::EMPTY, |acc, m| acc.hull(&m.bbox())))
}

/// Mean of per-pair IoU.
pub fn g_iou(pairs: &[(BitMask, BitMask)]) -> Result<f64, GeomError> {
    if pairs.is_empty() {
        return Err(GeomError::EmptyDataset);
    }
    let mut sum = 0.0;
    for (p, g) in pairs {
        sum += iou(p, g)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Summed intersections over summed unions.
pub fn c_iou(pairs: &[(BitMask, BitMask)]) -> Result<f64, GeomError> {
    if pairs.is_empty() {
        return Err(GeomError::EmptyDataset);
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pairs {
        let (i, u) = p.overlap(g)?;
        inter += i;
        union += u;
    }
    Ok(ratio(inter, union))
}
