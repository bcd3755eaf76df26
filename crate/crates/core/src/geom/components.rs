use serde::{Deserialize, Serialize};

use super::BitMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Splits `m` into connected components, ordered by each component's first
/// pixel in row-major scan order.
pub fn connected_components(m: &BitMask, connectivity: Connectivity) -> Vec<BitMask> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let bits = m.bits();
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = BitMask::empty(m.width(), m.height());
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            comp.set(x as u32, y as u32, true);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&BitMask::empty(5, 3), Connectivity::Four).is_empty());
    }

    #[test]
    fn solid_rectangle_is_one_component() {
        let m = BitMask::from_fn(6, 6, |x, y| (1..4).contains(&x) && (2..5).contains(&y));
        let cc = connected_components(&m, Connectivity::Four);
        assert_eq!(cc, vec![m]);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = BitMask::from_fn(2, 2, |x, y| x == y);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn order_follows_raster_scan() {
        // component B starts on row 0 at x=4, component A on row 1 at x=0
        let m = BitMask::from_fn(6, 3, |x, y| (x == 4 && y <= 2) || (x == 0 && y >= 1));
        let cc = connected_components(&m, Connectivity::Four);
        assert_eq!(cc.len(), 2);
        assert!(cc[0].get(4, 0));
        assert!(cc[1].get(0, 1));
    }

    fn arb_mask() -> impl Strategy<Value = BitMask> {
        (1u32..=16, 1u32..=16).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| BitMask::from_bits(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn components_partition_the_mask(m in arb_mask(), eight in any::<bool>()) {
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let cc = connected_components(&m, conn);
            let mut acc = BitMask::empty(m.width(), m.height());
            let mut total = 0;
            for c in &cc {
                prop_assert!(!c.is_empty());
                total += c.area();
                acc.union_with(c).unwrap();
            }
            prop_assert_eq!(total, m.area());
            prop_assert_eq!(acc, m);
        }
    }
}
