//! Threshold classifier that decodes phantom subtypes from stain colour.
//!
//! Two scalar stain signals are computed from RGB: `dab = 255 - B` (brown
//! absorbs blue) and `hem = B - R` (hematoxylin is blue/purple). Instances
//! are classified from their mean signals with fixed thresholds.

use crate::data::grid::{InstanceMap, RgbImage, SubtypeMask};
use crate::subtype::SubtypeClass;

/// `dab` boundaries separating her2_1 | her2_2 | her2_3.
const DAB_THRESHOLDS: [f64; 2] = [128.0, 185.0];
/// Below this `dab`, a hematoxylin-dominant region is her2_0, above it cis.
const CIS_DAB_THRESHOLD: f64 = 50.0;
/// `hem` above this marks hematoxylin-dominant (unstained or cis) tissue.
const HEM_THRESHOLD: f64 = 0.0;

/// Detection thresholds for tumor-like regions in unlabeled images.
const DETECT_DAB: f64 = 60.0;
const DETECT_HEM: f64 = 12.0;
const DETECT_RADIUS: usize = 2;
const DETECT_MIN_AREA: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainFeatures {
    pub dab: f64,
    pub hem: f64,
}

impl StainFeatures {
    pub fn of_color(rgb: [f64; 3]) -> Self {
        Self {
            dab: 255.0 - rgb[2],
            hem: rgb[2] - rgb[0],
        }
    }

    /// Mean signals over the pixels selected by `include`.
    pub fn mean_over(image: &RgbImage, include: impl Fn(usize, usize) -> bool) -> Option<Self> {
        let (w, h) = image.dims();
        let (mut r, mut b, mut n) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if include(x, y) {
                    let p = image.get(x, y);
                    r += p[0] as f64;
                    b += p[2] as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| Self::of_color([r / n as f64, 0.0, b / n as f64]))
    }

    pub fn classify(self) -> SubtypeClass {
        if self.hem > HEM_THRESHOLD {
            if self.dab < CIS_DAB_THRESHOLD {
                SubtypeClass::Her2Zero
            } else {
                SubtypeClass::Cis
            }
        } else if self.dab < DAB_THRESHOLDS[0] {
            SubtypeClass::Her2One
        } else if self.dab < DAB_THRESHOLDS[1] {
            SubtypeClass::Her2Two
        } else {
            SubtypeClass::Her2Three
        }
    }
}

/// Classifies the pixels of instance `id`; `None` when the instance is absent.
pub fn classify_instance(image: &RgbImage, instances: &InstanceMap, id: u16) -> Option<SubtypeClass> {
    StainFeatures::mean_over(image, |x, y| instances.get(x, y) == id).map(StainFeatures::classify)
}

/// Classifies every pixel region of a given subtype code in `mask`.
pub fn classify_region(image: &RgbImage, mask: &SubtypeMask, code: u8) -> Option<SubtypeClass> {
    StainFeatures::mean_over(image, |x, y| mask.get(x, y) == code).map(StainFeatures::classify)
}

/// Mean `dab` signal over `mask == code`, used for directional checks.
pub fn mean_dab(image: &RgbImage, include: impl Fn(usize, usize) -> bool) -> Option<f64> {
    StainFeatures::mean_over(image, include).map(|f| f.dab)
}

/// Number of connected tumor-signature regions in an unlabeled image.
///
/// Stain signals are box-averaged over a `(2r+1)^2` window so thin
/// artifact streaks fall below threshold; connected components (4-neighbour)
/// of flagged pixels with area at least `DETECT_MIN_AREA` are counted.
pub fn count_tumor_regions(image: &RgbImage) -> usize {
    let (w, h) = image.dims();
    let mut dab = vec![0.0; w * h];
    let mut hem = vec![0.0; w * h];
    for (i, p) in image.pixels().iter().enumerate() {
        let f = StainFeatures::of_color([p[0] as f64, p[1] as f64, p[2] as f64]);
        dab[i] = f.dab;
        hem[i] = f.hem;
    }
    let r = DETECT_RADIUS as isize;
    let mut flagged = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sd, mut sh, mut n) = (0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let i = ny as usize * w + nx as usize;
                        sd += dab[i];
                        sh += hem[i];
                        n += 1.0;
                    }
                }
            }
            flagged[y * w + x] = sd / n > DETECT_DAB || sh / n > DETECT_HEM;
        }
    }
    let mut seen = vec![false; w * h];
    let mut regions = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !flagged[start] || seen[start] {
            continue;
        }
        let mut area = 0;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if flagged[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area >= DETECT_MIN_AREA {
            regions += 1;
        }
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantom_slide, subtype_color};

    #[test]
    fn base_colors_classify_to_their_subtype() {
        for class in SubtypeClass::HER2 {
            assert_eq!(StainFeatures::of_color(subtype_color(class)).classify(), class);
        }
    }

    #[test]
    fn phantom_background_has_no_tumor_regions() {
        for seed in 0..10 {
            let s = generate_phantom_slide(seed, 64, 0).unwrap();
            assert_eq!(count_tumor_regions(&s.image), 0, "seed {seed}");
        }
    }

    #[test]
    fn phantom_instances_are_detected() {
        let s = generate_phantom_slide(3, 128, 5).unwrap();
        assert!(count_tumor_regions(&s.image) >= 3);
    }
}
