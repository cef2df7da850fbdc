//! Procedural phantom slides standing in for clinical HER2 data.
//!
//! Background is a textured near-white field with occasional thin grey
//! artifact streaks. Each tumor instance is an elliptical cell cluster whose
//! stain colour is a fixed function of its subtype: the brown (DAB) signal
//! grows monotonically from `her2_0` to `her2_3`, and `cis` is drawn as a
//! pale interior with a dark hematoxylin border.

use std::f64::consts::PI;
use std::path::Path;

use histosynth_tensor::{seeded, SeededRng};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::annotation::{AnnotationDocument, Region};
use crate::data::dataset::{write_dataset, DatasetItem, Manifest, SlideRecord};
use crate::data::grid::{InstanceMap, RgbImage, SubtypeMask};
use crate::data::patch::{extract_patches, LabeledPatch, Slide};
use crate::data::raster::rasterize_annotations;
use crate::data::split::{make_split, SplitMap};
use crate::error::{Error, Result};
use crate::subtype::SubtypeClass;

pub const MIN_PHANTOM_SIZE: usize = 64;

const BACKGROUND: [f64; 3] = [232.0, 226.0, 234.0];
const STREAK: [f64; 3] = [150.0, 150.0, 160.0];
const CIS_BORDER: [f64; 3] = [80.0, 45.0, 120.0];
const CIS_BORDER_WIDTH: usize = 2;
const RADIUS_RANGE: (f64, f64) = (7.0, 14.0);
const POLYGON_VERTICES: usize = 20;

/// Base tissue colour of each subtype.
pub fn subtype_color(class: SubtypeClass) -> [f64; 3] {
    match class {
        SubtypeClass::Background => BACKGROUND,
        SubtypeClass::Her2Zero => [200.0, 185.0, 225.0],
        SubtypeClass::Her2One => [215.0, 180.0, 160.0],
        SubtypeClass::Her2Two => [190.0, 135.0, 95.0],
        SubtypeClass::Her2Three => [150.0, 90.0, 45.0],
        SubtypeClass::Cis => [205.0, 185.0, 215.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSlide {
    pub image: RgbImage,
    pub mask: SubtypeMask,
    pub instances: InstanceMap,
    pub annotation: AnnotationDocument,
}

impl PhantomSlide {
    pub fn into_slide(self) -> Slide {
        Slide {
            slide_id: self.annotation.slide_id.clone(),
            image: self.image,
            mask: self.mask,
            instances: self.instances,
        }
    }
}

/// A phantom slide with `n_instances` cell clusters of uniformly random subtype.
pub fn generate_phantom_slide(seed: u64, size: usize, n_instances: usize) -> Result<PhantomSlide> {
    generate_phantom_slide_weighted(seed, size, n_instances, &[1.0; 5], &format!("phantom{seed}"))
}

/// Like [`generate_phantom_slide`] with subtype draw weights aligned with
/// [`SubtypeClass::TUMOR`].
pub fn generate_phantom_slide_weighted(
    seed: u64,
    size: usize,
    n_instances: usize,
    subtype_weights: &[f64; 5],
    slide_id: &str,
) -> Result<PhantomSlide> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::Config(format!(
            "phantom size {size} below minimum {MIN_PHANTOM_SIZE}"
        )));
    }
    if n_instances > u16::MAX as usize {
        return Err(Error::Config(format!("too many instances: {n_instances}")));
    }
    let total_weight: f64 = subtype_weights.iter().sum();
    if !(total_weight > 0.0) || subtype_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Config("subtype weights must be non-negative with positive sum".into()));
    }
    let mut rng = seeded(seed);

    let mut annotation = AnnotationDocument::new(slide_id);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..n_instances {
        let subtype = draw_weighted(&mut rng, subtype_weights);
        let rx = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
        let ry = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
        let theta = rng.random_range(0.0..PI);
        let r = rx.max(ry);
        let lo = r + 1.0;
        let hi = size as f64 - r - 1.0;
        let mut center = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        for _ in 0..60 {
            let clear = placed
                .iter()
                .all(|&(cx, cy, cr)| ((cx - center.0).powi(2) + (cy - center.1).powi(2)).sqrt() > cr + r + 2.0);
            if clear {
                break;
            }
            center = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        }
        placed.push((center.0, center.1, r));
        let polygon = (0..POLYGON_VERTICES)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / POLYGON_VERTICES as f64;
                let (ex, ey) = (rx * a.cos(), ry * a.sin());
                let x = center.0 + ex * theta.cos() - ey * theta.sin();
                let y = center.1 + ex * theta.sin() + ey * theta.cos();
                [x.clamp(0.0, size as f64), y.clamp(0.0, size as f64)]
            })
            .collect();
        annotation.regions.push(Region {
            instance_id: i as u32 + 1,
            subtype,
            polygon,
        });
    }

    let (mask, instances) = rasterize_annotations(&annotation, size, size)?;
    let image = render(&mut rng, &mask, &instances);
    Ok(PhantomSlide {
        image,
        mask,
        instances,
        annotation,
    })
}

fn draw_weighted(rng: &mut SeededRng, weights: &[f64; 5]) -> SubtypeClass {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (class, &w) in SubtypeClass::TUMOR.iter().zip(weights) {
        if u < w {
            return *class;
        }
        u -= w;
    }
    *SubtypeClass::TUMOR
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(c, _)| c)
        .expect("positive total weight")
}

fn render(rng: &mut SeededRng, mask: &SubtypeMask, instances: &InstanceMap) -> RgbImage {
    let (w, h) = mask.dims();
    // Low-frequency illumination field on an 8-pixel lattice.
    let cell = 8;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-5.0..5.0)).collect();
    let shade = |x: usize, y: usize| {
        let fx = x as f64 / cell as f64;
        let fy = y as f64 / cell as f64;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let at = |i: usize, j: usize| lattice[j * gw + i];
        (1.0 - ty) * ((1.0 - tx) * at(ix, iy) + tx * at(ix + 1, iy))
            + ty * ((1.0 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1))
    };

    let mut streak = vec![false; w * h];
    let expected_streaks = (w * h) as f64 / (192.0 * 192.0);
    let n_streaks = (expected_streaks + rng.random::<f64>()).floor() as usize;
    for _ in 0..n_streaks {
        let (mut x, mut y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let angle = rng.random_range(0.0..2.0 * PI);
        let len = rng.random_range(20.0..60.0);
        for _ in 0..len as usize {
            if (0.0..w as f64).contains(&x) && (0.0..h as f64).contains(&y) {
                streak[y as usize * w + x as usize] = true;
            }
            x += angle.cos();
            y += angle.sin();
        }
    }

    // Nuclei: small dark dots scattered over tissue.
    let mut nucleus = vec![false; w * h];
    let n_nuclei = w * h / 40;
    for _ in 0..n_nuclei {
        let cx = rng.random_range(0..w) as isize;
        let cy = rng.random_range(0..h) as isize;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1), (-1, 0), (0, -1)] {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                nucleus[y as usize * w + x as usize] = true;
            }
        }
    }

    let is_border = |x: usize, y: usize| -> bool {
        let id = instances.get(x, y);
        let r = CIS_BORDER_WIDTH as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    return true;
                }
                if instances.get(nx as usize, ny as usize) != id {
                    return true;
                }
            }
        }
        false
    };

    RgbImage::from_fn(w, h, |x, y| {
        let class = SubtypeClass::ALL[mask.get(x, y) as usize];
        let idx = y * w + x;
        let mut color = match class {
            SubtypeClass::Background if streak[idx] => STREAK,
            SubtypeClass::Cis if is_border(x, y) => CIS_BORDER,
            c => subtype_color(c),
        };
        if class.is_tumor() && nucleus[idx] {
            color = [color[0] * 0.78, color[1] * 0.78, color[2] * 0.78 + 20.0];
        }
        let s = shade(x, y);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let noise = rng.random_range(-3.0..3.0);
            *out = (color[c] + s + noise).round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

/// Layout of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomDatasetConfig {
    pub slides: usize,
    pub slide_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub instances_per_slide: usize,
    /// Subtype prevalence aligned with [`SubtypeClass::TUMOR`]; deliberately imbalanced.
    pub prevalence: [f64; 5],
    /// Multiplier applied to the prevalence of the subtype matching a slide's score bin.
    pub bin_emphasis: f64,
    pub split: (usize, usize, usize),
    pub seed: u64,
}

impl Default for PhantomDatasetConfig {
    fn default() -> Self {
        Self {
            slides: 40,
            slide_size: 128,
            patch_size: 64,
            stride: 64,
            instances_per_slide: 8,
            prevalence: [0.08, 0.22, 0.30, 0.25, 0.15],
            bin_emphasis: 2.0,
            split: (24, 8, 8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub slides: Vec<PhantomSlide>,
    /// Aggregate HER2 score bin (0..=3) per slide.
    pub score_bins: Vec<u8>,
    pub patches: Vec<LabeledPatch>,
    pub split: SplitMap,
}

/// Generates slides, tiles them into patches and splits them by slide with
/// score-bin stratification.
pub fn generate_phantom_dataset(config: &PhantomDatasetConfig) -> Result<PhantomDataset> {
    let mut slides = Vec::with_capacity(config.slides);
    let mut score_bins = Vec::with_capacity(config.slides);
    let mut patches = Vec::new();
    for i in 0..config.slides {
        let bin = (i % 4) as u8;
        let mut weights = config.prevalence;
        weights[bin as usize] *= config.bin_emphasis;
        let slide_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let slide = generate_phantom_slide_weighted(
            slide_seed,
            config.slide_size,
            config.instances_per_slide,
            &weights,
            &format!("slide{i:03}"),
        )?;
        patches.extend(extract_patches(&slide.clone().into_slide(), config.patch_size, config.stride)?);
        slides.push(slide);
        score_bins.push(bin);
    }
    let ids: Vec<String> = slides.iter().map(|s| s.annotation.slide_id.clone()).collect();
    let split = make_split(&ids, config.split, Some(&score_bins), config.seed)?;
    Ok(PhantomDataset {
        slides,
        score_bins,
        patches,
        split,
    })
}

impl PhantomDataset {
    /// Writes every patch with its slide records and split under `root`.
    pub fn write(&self, root: &Path) -> Result<Manifest> {
        let items: Vec<DatasetItem> = self.patches.iter().cloned().map(DatasetItem::real).collect();
        let slides = self
            .slides
            .iter()
            .zip(&self.score_bins)
            .map(|(s, &bin)| {
                let id = &s.annotation.slide_id;
                SlideRecord {
                    slide_id: id.clone(),
                    aggregate_score_bin: Some(bin),
                    patches: items.iter().filter(|i| &i.patch.slide_id == id).map(|i| i.id.clone()).collect(),
                }
            })
            .collect();
        write_dataset(root, &items, slides, self.split.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staining::{classify_instance, StainFeatures};

    #[test]
    fn no_instances_means_pure_background() {
        let s = generate_phantom_slide(1, 64, 0).unwrap();
        assert!(s.mask.pixels().iter().all(|&c| c == 0));
        assert!(s.instances.pixels().iter().all(|&c| c == 0));
        assert!(s.annotation.regions.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom_slide(5, 96, 6).unwrap();
        let b = generate_phantom_slide(5, 96, 6).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_slide(6, 96, 6).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn arrays_satisfy_patch_invariants() {
        let s = generate_phantom_slide(2, 128, 10).unwrap();
        LabeledPatch::new(s.image, s.mask, s.instances, "x", (0, 0)).unwrap();
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(generate_phantom_slide(0, 32, 1).is_err());
    }

    #[test]
    fn mean_brown_signal_increases_with_her2_score() {
        let dab: Vec<f64> = SubtypeClass::HER2
            .iter()
            .map(|&c| StainFeatures::of_color(subtype_color(c)).dab)
            .collect();
        assert!(dab.windows(2).all(|w| w[0] < w[1]), "{dab:?}");
    }

    #[test]
    fn ground_truth_instances_decode_to_their_subtype() {
        let s = generate_phantom_slide(11, 1024, 200).unwrap();
        let patch = LabeledPatch::new(s.image, s.mask, s.instances, "x", (0, 0)).unwrap();
        let table = patch.instance_table();
        let correct = table
            .iter()
            .filter(|info| classify_instance(&patch.image, &patch.instances, info.id) == Some(info.subtype))
            .count();
        let accuracy = correct as f64 / table.len() as f64;
        assert!(table.len() >= 195, "visible instances {}", table.len());
        assert!(accuracy >= 0.99, "accuracy {accuracy}");
    }

    #[test]
    fn dataset_split_follows_slide_assignment() {
        let cfg = PhantomDatasetConfig {
            slides: 8,
            split: (4, 2, 2),
            ..Default::default()
        };
        let ds = generate_phantom_dataset(&cfg).unwrap();
        assert_eq!(ds.patches.len(), 8 * 4);
        assert_eq!(ds.split.len(), 8);
        for p in &ds.patches {
            assert!(ds.split.contains_key(&p.slide_id));
        }
    }
}
