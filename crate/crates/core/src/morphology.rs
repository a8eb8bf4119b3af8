//! Binary morphology with disk structuring elements.

use ndarray::Array2;

use crate::study::{ParamMaps, ScarMask};

/// Offsets `(di, dj)` with `di^2 + dj^2 <= r^2`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                out.push((di, dj));
            }
        }
    }
    out
}

fn shifted(
    mask: &Array2<bool>,
    offsets: &[(isize, isize)],
    outside: bool,
    any: bool,
) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut hits = offsets.iter().map(|&(di, dj)| {
            let (y, x) = (i as isize + di, j as isize + dj);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                outside
            } else {
                mask[[y as usize, x as usize]]
            }
        });
        if any {
            hits.any(|b| b)
        } else {
            hits.all(|b| b)
        }
    })
}

/// Dilation; pixels beyond the border count as background.
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    shifted(mask, &disk(radius), false, true)
}

/// Erosion; pixels beyond the border count as foreground, so closing never
/// eats into shapes touching the border.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    shifted(mask, &disk(radius), true, false)
}

/// Dilation followed by erosion.
pub fn closing(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    erode(&dilate(mask, radius), radius)
}

/// Hard editable-region mask: the closed support of the initial parameters,
/// binarized at 0.5.
pub fn build_ablation_mask(params0: &ParamMaps, radius: usize) -> ScarMask {
    let closed = closing(&params0.support(), radius);
    let soft = closed.mapv(|b| if b { 1.0f32 } else { 0.0 });
    ScarMask(soft).binarize(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::ParamRanges;
    use ndarray::Array3;
    use proptest::prelude::*;

    /// `x` is in the closing iff every in-image disk translate that covers `x`
    /// also touches the set.
    fn closing_by_translates(mask: &Array2<bool>, r: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let r2 = (r * r) as isize;
        let near = |a: (usize, usize), b: (usize, usize)| {
            let di = a.0 as isize - b.0 as isize;
            let dj = a.1 as isize - b.1 as isize;
            di * di + dj * dj <= r2
        };
        Array2::from_shape_fn((h, w), |x| {
            (0..h).all(|yi| {
                (0..w).all(|yj| {
                    let y = (yi, yj);
                    if !near(x, y) {
                        return true;
                    }
                    (0..h).any(|zi| (0..w).any(|zj| near(y, (zi, zj)) && mask[[zi, zj]]))
                })
            })
        })
    }

    fn block_with_hole() -> Array2<bool> {
        let mut m = Array2::from_elem((11, 11), false);
        for i in 2..9 {
            for j in 2..9 {
                m[[i, j]] = true;
            }
        }
        m[[5, 5]] = false;
        m
    }

    #[test]
    fn disk_sizes() {
        assert_eq!(disk(0).len(), 1);
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn hole_in_block_is_filled() {
        let m = block_with_hole();
        let c = closing(&m, 1);
        assert!(c[[5, 5]]);
        assert_eq!(c, closing_by_translates(&m, 1));
    }

    #[test]
    fn isolated_pixel_survives() {
        let mut m = Array2::from_elem((7, 7), false);
        m[[3, 3]] = true;
        assert_eq!(closing(&m, 1), m);
    }

    #[test]
    fn mask_from_params() {
        let ranges = ParamRanges::default();
        assert_eq!(
            build_ablation_mask(&ParamMaps::zeros(9, 9, ranges), 2).count(),
            0
        );
        let mut ch = Array3::<f32>::zeros((4, 11, 11));
        for ((_, i, j), v) in ch.indexed_iter_mut() {
            if block_with_hole()[[i, j]] {
                *v = 0.5;
            }
        }
        let m = build_ablation_mask(&ParamMaps::new(ch, ranges).unwrap(), 1);
        assert!(m.is_hard());
        assert_eq!(m.0[[5, 5]], 1.0);
        assert_eq!(m.count(), 49);
    }

    proptest! {
        #[test]
        fn closing_matches_translate_definition(
            bits in proptest::collection::vec(any::<bool>(), 64),
            r in 1usize..3
        ) {
            let m = Array2::from_shape_vec((8, 8), bits).unwrap();
            prop_assert_eq!(closing(&m, r), closing_by_translates(&m, r));
        }

        #[test]
        fn closing_is_extensive_and_idempotent(
            bits in proptest::collection::vec(any::<bool>(), 100),
            r in 1usize..4
        ) {
            let m = Array2::from_shape_vec((10, 10), bits).unwrap();
            let c = closing(&m, r);
            prop_assert!(m.iter().zip(c.iter()).all(|(&a, &b)| !a || b));
            prop_assert_eq!(closing(&c, r), c);
        }
    }
}
