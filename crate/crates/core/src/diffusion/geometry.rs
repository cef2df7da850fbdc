//! Pixel/latent grid correspondence.

use crate::data::grid::{Grid, SubtypeMask};
use crate::error::{Error, Result};
use crate::subtype::NUM_CLASSES;

pub(crate) fn check_divisible(w: usize, h: usize, f: usize) -> Result<()> {
    if f == 0 || !w.is_multiple_of(f) || !h.is_multiple_of(f) {
        return Err(Error::Shape(format!("{w}x{h} is not divisible by compression factor {f}")));
    }
    Ok(())
}

/// Majority vote over each `f x f` block; ties go to the lowest code.
pub fn downsample_mask(mask: &SubtypeMask, f: usize) -> Result<SubtypeMask> {
    let (w, h) = mask.dims();
    check_divisible(w, h, f)?;
    Ok(Grid::from_fn(w / f, h / f, |bx, by| {
        let mut votes = [0usize; NUM_CLASSES];
        for y in by * f..(by + 1) * f {
            for x in bx * f..(bx + 1) * f {
                votes[(mask.get(x, y) as usize).min(NUM_CLASSES - 1)] += 1;
            }
        }
        let mut best = 0;
        for (code, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = code;
            }
        }
        best as u8
    }))
}

/// Latent positions whose `f x f` footprint contains no pixel of `region`.
pub fn known_latent_positions(region: &Grid<bool>, f: usize) -> Result<Grid<bool>> {
    let (w, h) = region.dims();
    check_divisible(w, h, f)?;
    Ok(Grid::from_fn(w / f, h / f, |bx, by| {
        (by * f..(by + 1) * f).all(|y| (bx * f..(bx + 1) * f).all(|x| !region.get(x, y)))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tie_goes_to_lower_code() {
        let m = SubtypeMask::from_vec(2, 2, vec![4, 4, 1, 1]).unwrap();
        assert_eq!(downsample_mask(&m, 2).unwrap().pixels(), &[1]);
        let m = SubtypeMask::from_vec(2, 2, vec![4, 4, 4, 0]).unwrap();
        assert_eq!(downsample_mask(&m, 2).unwrap().pixels(), &[4]);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert!(downsample_mask(&SubtypeMask::filled(6, 8, 0), 4).is_err());
    }

    #[test]
    fn footprint_touching_region_is_unknown() {
        let mut r = Grid::filled(8, 8, false);
        r.set(3, 0, true);
        let k = known_latent_positions(&r, 4).unwrap();
        assert_eq!(k.pixels(), &[false, true, true, true]);
    }

    proptest! {
        #[test]
        fn block_constant_masks_are_fixed_points(codes in proptest::collection::vec(0u8..6, 16), f in 1usize..5) {
            let coarse = SubtypeMask::from_vec(4, 4, codes).unwrap();
            let fine = SubtypeMask::from_fn(4 * f, 4 * f, |x, y| coarse.get(x / f, y / f));
            let down = downsample_mask(&fine, f).unwrap();
            prop_assert_eq!(&down, &coarse);
            // idempotent once at latent resolution
            prop_assert_eq!(downsample_mask(&down, 1).unwrap(), down);
        }

        #[test]
        fn majority_matches_a_counting_oracle(codes in proptest::collection::vec(0u8..6, 64)) {
            let m = SubtypeMask::from_vec(8, 8, codes).unwrap();
            let d = downsample_mask(&m, 4).unwrap();
            for by in 0..2 {
                for bx in 0..2 {
                    let mut counts = std::collections::BTreeMap::new();
                    for y in 0..4 { for x in 0..4 { *counts.entry(m.get(bx * 4 + x, by * 4 + y)).or_insert(0) += 1; } }
                    let max = *counts.values().max().unwrap();
                    let winner = *counts.iter().find(|(_, &c)| c == max).unwrap().0;
                    prop_assert_eq!(d.get(bx, by), winner);
                }
            }
        }
    }
}
