//! Labeled patches and grid-aligned patch extraction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::grid::{InstanceMap, RgbImage, SubtypeMask};
use crate::error::{Error, Result};
use crate::subtype::SubtypeClass;

/// An RGB tile with its per-pixel subtype codes and instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub mask: SubtypeMask,
    pub instances: InstanceMap,
    pub slide_id: String,
    pub origin: (usize, usize),
}

/// A full annotated slide (or region of interest) before tiling.
#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub image: RgbImage,
    pub mask: SubtypeMask,
    pub instances: InstanceMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u16,
    pub subtype: SubtypeClass,
    pub pixels: usize,
}

impl LabeledPatch {
    pub fn new(
        image: RgbImage,
        mask: SubtypeMask,
        instances: InstanceMap,
        slide_id: impl Into<String>,
        origin: (usize, usize),
    ) -> Result<Self> {
        let patch = Self {
            image,
            mask,
            instances,
            slide_id: slide_id.into(),
            origin,
        };
        patch.validate()?;
        Ok(patch)
    }

    /// Stable identifier `"{slide}_{x}_{y}"`.
    pub fn id(&self) -> String {
        format!("{}_{}_{}", self.slide_id, self.origin.0, self.origin.1)
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Checks shared geometry, tumor/instance support equality and
    /// single-subtype instances.
    pub fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        if self.mask.dims() != dims || self.instances.dims() != dims {
            return Err(Error::Shape(format!(
                "image {:?}, mask {:?}, instances {:?} disagree",
                dims,
                self.mask.dims(),
                self.instances.dims()
            )));
        }
        let mut subtype_of: HashMap<u16, u8> = HashMap::new();
        for (&code, &id) in self.mask.pixels().iter().zip(self.instances.pixels()) {
            SubtypeClass::from_code(code)?;
            if (code > 0) != (id > 0) {
                return Err(Error::Validation(format!(
                    "patch {}: tumor support and instance support differ (code {code}, instance {id})",
                    self.id()
                )));
            }
            if id > 0 {
                let prev = *subtype_of.entry(id).or_insert(code);
                if prev != code {
                    return Err(Error::Validation(format!(
                        "patch {}: instance {id} carries codes {prev} and {code}",
                        self.id()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Instances present in the patch, sorted by id.
    pub fn instance_table(&self) -> Vec<InstanceInfo> {
        let mut table: HashMap<u16, (u8, usize)> = HashMap::new();
        for (&code, &id) in self.mask.pixels().iter().zip(self.instances.pixels()) {
            if id > 0 {
                table.entry(id).or_insert((code, 0)).1 += 1;
            }
        }
        let mut out: Vec<InstanceInfo> = table
            .into_iter()
            .map(|(id, (code, pixels))| InstanceInfo {
                id,
                subtype: SubtypeClass::from_code(code).expect("validated code"),
                pixels,
            })
            .collect();
        out.sort_by_key(|i| i.id);
        out
    }

    /// Pixel count per subtype code.
    pub fn class_histogram(&self) -> [usize; crate::subtype::NUM_CLASSES] {
        let mut hist = [0usize; crate::subtype::NUM_CLASSES];
        for &c in self.mask.pixels() {
            hist[c as usize] += 1;
        }
        hist
    }

    pub fn has_tumor(&self) -> bool {
        self.mask.pixels().iter().any(|&c| c > 0)
    }

    /// Tumor subtype with the most pixels; ties go to the lower code.
    pub fn dominant_subtype(&self) -> Option<SubtypeClass> {
        let hist = self.class_histogram();
        let mut best: Option<(usize, usize)> = None;
        for (code, &count) in hist.iter().enumerate().skip(1) {
            if count > 0 && best.is_none_or(|(_, c)| count > c) {
                best = Some((code, count));
            }
        }
        best.map(|(code, _)| SubtypeClass::ALL[code])
    }

    /// Binary segmentation target: any tumor subtype maps to 1.
    pub fn tumor_target(&self) -> Grid01 {
        self.mask.map(|c| u8::from(c > 0))
    }
}

/// A 0/1 grid.
pub type Grid01 = crate::data::grid::Grid<u8>;

/// Number of patches [`extract_patches`] yields for a `w x h` slide.
pub fn patch_count(w: usize, h: usize, patch: usize, stride: usize) -> usize {
    if patch == 0 || stride == 0 || patch > w || patch > h {
        return 0;
    }
    ((w - patch) / stride + 1) * ((h - patch) / stride + 1)
}

/// Grid-aligned crops at offsets `0, stride, 2*stride, ...` lying fully inside
/// the slide, in row-major order. Instance ids are kept as in the slide.
pub fn extract_patches(slide: &Slide, patch: usize, stride: usize) -> Result<Vec<LabeledPatch>> {
    let (w, h) = slide.image.dims();
    if slide.mask.dims() != (w, h) || slide.instances.dims() != (w, h) {
        return Err(Error::Shape(format!("slide {} arrays disagree in size", slide.slide_id)));
    }
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if patch > w || patch > h {
        return Err(Error::Shape(format!(
            "patch {patch} exceeds slide {} of size {w}x{h}",
            slide.slide_id
        )));
    }
    let mut out = Vec::with_capacity(patch_count(w, h, patch, stride));
    for y in (0..=h - patch).step_by(stride) {
        for x in (0..=w - patch).step_by(stride) {
            out.push(LabeledPatch {
                image: slide.image.crop(x, y, patch, patch)?,
                mask: slide.mask.crop(x, y, patch, patch)?,
                instances: slide.instances.crop(x, y, patch, patch)?,
                slide_id: slide.slide_id.clone(),
                origin: (x, y),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_slide(size: usize) -> Slide {
        Slide {
            slide_id: "s".into(),
            image: RgbImage::from_fn(size, size, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]),
            mask: SubtypeMask::filled(size, size, 0),
            instances: InstanceMap::filled(size, size, 0),
        }
    }

    #[test]
    fn count_formula_examples() {
        assert_eq!(patch_count(1536, 1536, 512, 512), 9);
        assert_eq!(patch_count(1536, 1536, 512, 256), 25);
        assert_eq!(patch_count(512, 512, 512, 512), 1);
    }

    #[test]
    fn extraction_matches_count_formula() {
        let slide = blank_slide(96);
        for (p, s) in [(32, 32), (32, 16), (64, 7), (96, 1)] {
            assert_eq!(extract_patches(&slide, p, s).unwrap().len(), patch_count(96, 96, p, s));
        }
    }

    #[test]
    fn patch_sized_slide_yields_itself() {
        let slide = blank_slide(32);
        let patches = extract_patches(&slide, 32, 32).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].image, slide.image);
        assert_eq!(patches[0].origin, (0, 0));
    }

    #[test]
    fn oversized_patch_is_an_error() {
        assert!(extract_patches(&blank_slide(16), 32, 32).is_err());
    }

    #[test]
    fn clipped_instances_keep_their_id() {
        let mut slide = blank_slide(8);
        for y in 2..6 {
            for x in 2..6 {
                slide.mask.set(x, y, 3);
                slide.instances.set(x, y, 42);
            }
        }
        let patches = extract_patches(&slide, 4, 4).unwrap();
        for p in &patches {
            p.validate().unwrap();
            let table = p.instance_table();
            assert_eq!(table.len(), 1);
            assert_eq!(table[0].id, 42);
            assert_eq!(table[0].pixels, 4);
        }
    }

    #[test]
    fn validation_catches_support_mismatch_and_mixed_instances() {
        let mut p = extract_patches(&blank_slide(4), 4, 4).unwrap().remove(0);
        p.mask.set(0, 0, 2);
        assert!(p.validate().is_err());
        p.instances.set(0, 0, 1);
        p.validate().unwrap();
        p.mask.set(1, 0, 3);
        p.instances.set(1, 0, 1);
        assert!(p.validate().is_err());
    }

    #[test]
    fn dominant_subtype_prefers_lower_code_on_ties() {
        let mut p = extract_patches(&blank_slide(4), 4, 4).unwrap().remove(0);
        assert_eq!(p.dominant_subtype(), None);
        p.mask.set(0, 0, 4);
        p.mask.set(1, 0, 2);
        assert_eq!(p.dominant_subtype(), Some(SubtypeClass::Her2One));
    }
}
