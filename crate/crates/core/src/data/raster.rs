//! Scanline rasterization of annotation polygons.

use crate::data::annotation::AnnotationDocument;
use crate::data::grid::{InstanceMap, SubtypeMask};
use crate::error::Result;

/// Paints every region into a subtype mask and an instance map.
///
/// A pixel belongs to a polygon when its center `(x + 0.5, y + 0.5)` is
/// inside under the even-odd rule. Regions are painted in document order,
/// so later regions win where polygons overlap.
pub fn rasterize_annotations(
    doc: &AnnotationDocument,
    width: usize,
    height: usize,
) -> Result<(SubtypeMask, InstanceMap)> {
    doc.validate(width, height)?;
    let mut mask = SubtypeMask::filled(width, height, 0);
    let mut instances = InstanceMap::filled(width, height, 0);
    let mut crossings = Vec::new();
    for region in &doc.regions {
        let poly = &region.polygon;
        let (ymin, ymax) = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let row_lo = (ymin - 0.5).ceil().max(0.0) as usize;
        let row_hi = ((ymax - 0.5).floor() as isize).min(height as isize - 1);
        if row_hi < row_lo as isize {
            continue;
        }
        for y in row_lo..=row_hi as usize {
            let py = y as f64 + 0.5;
            crossings.clear();
            for i in 0..poly.len() {
                let [xi, yi] = poly[i];
                let [xj, yj] = poly[(i + poly.len() - 1) % poly.len()];
                if (yi > py) != (yj > py) {
                    crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                // centers px with pair[0] <= px < pair[1]
                let x_lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let x_hi = ((pair[1] - 0.5).ceil() as isize).min(width as isize);
                for x in x_lo..x_hi.max(0) as usize {
                    mask.set(x, y, region.subtype.code());
                    instances.set(x, y, region.instance_id as u16);
                }
            }
        }
    }
    Ok((mask, instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotation::Region;
    use crate::subtype::SubtypeClass;
    use proptest::prelude::*;

    /// Independent point-in-polygon test (ray casting to +x).
    fn contains(poly: &[[f64; 2]], px: f64, py: f64) -> bool {
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let [xi, yi] = poly[i];
            let [xj, yj] = poly[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn brute_force(doc: &AnnotationDocument, w: usize, h: usize) -> (Vec<u8>, Vec<u16>) {
        let mut mask = vec![0u8; w * h];
        let mut inst = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                for r in &doc.regions {
                    if contains(&r.polygon, x as f64 + 0.5, y as f64 + 0.5) {
                        mask[y * w + x] = r.subtype.code();
                        inst[y * w + x] = r.instance_id as u16;
                    }
                }
            }
        }
        (mask, inst)
    }

    fn square(id: u32, subtype: SubtypeClass, lo: f64, hi: f64) -> Region {
        Region {
            instance_id: id,
            subtype,
            polygon: vec![[lo, lo], [hi, lo], [hi, hi], [lo, hi]],
        }
    }

    #[test]
    fn empty_document_gives_zero_arrays() {
        let doc = AnnotationDocument::new("s");
        let (m, i) = rasterize_annotations(&doc, 8, 8).unwrap();
        assert!(m.pixels().iter().all(|&v| v == 0));
        assert!(i.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn square_covers_sixteen_pixels() {
        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(square(7, SubtypeClass::Her2Three, 2.0, 6.0));
        let (m, i) = rasterize_annotations(&doc, 8, 8).unwrap();
        let (bm, bi) = brute_force(&doc, 8, 8);
        assert_eq!(m.pixels(), &bm[..]);
        assert_eq!(i.pixels(), &bi[..]);
        assert_eq!(m.pixels().iter().filter(|&&v| v == 4).count(), 16);
        assert_eq!(i.pixels().iter().filter(|&&v| v == 7).count(), 16);
        for y in 2..6 {
            for x in 2..6 {
                assert_eq!(m.get(x, y), 4);
            }
        }
    }

    #[test]
    fn later_region_wins_overlap() {
        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(square(1, SubtypeClass::Her2Three, 1.0, 5.0));
        doc.regions.push(square(2, SubtypeClass::Her2Zero, 3.0, 7.0));
        let (m, i) = rasterize_annotations(&doc, 8, 8).unwrap();
        let (bm, bi) = brute_force(&doc, 8, 8);
        assert_eq!(m.pixels(), &bm[..]);
        assert_eq!(i.pixels(), &bi[..]);
        assert_eq!((m.get(3, 3), i.get(3, 3)), (SubtypeClass::Her2Zero.code(), 2));
        assert_eq!((m.get(1, 1), i.get(1, 1)), (SubtypeClass::Her2Three.code(), 1));
    }

    #[test]
    fn full_frame_polygon_fills_everything() {
        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(Region {
            instance_id: 3,
            subtype: SubtypeClass::Cis,
            polygon: vec![[0.0, 0.0], [9.0, 0.0], [9.0, 5.0], [0.0, 5.0]],
        });
        let (m, _) = rasterize_annotations(&doc, 9, 5).unwrap();
        assert!(m.pixels().iter().all(|&v| v == SubtypeClass::Cis.code()));
    }

    #[test]
    fn validation_errors_propagate() {
        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(Region {
            instance_id: 5,
            subtype: SubtypeClass::Cis,
            polygon: vec![[0.0, 0.0], [1.0, 1.0]],
        });
        assert!(rasterize_annotations(&doc, 4, 4).is_err());
    }

    fn arb_polygon() -> impl Strategy<Value = Vec<[f64; 2]>> {
        proptest::collection::vec((0u32..=24, 0u32..=20), 3..8).prop_map(|pts| {
            pts.into_iter()
                .map(|(x, y)| [x as f64 * 0.5, y as f64 * 0.75])
                .collect()
        })
    }

    proptest! {
        #[test]
        fn scanline_agrees_with_point_in_polygon(polys in proptest::collection::vec(arb_polygon(), 1..4)) {
            let mut doc = AnnotationDocument::new("p");
            for (i, polygon) in polys.into_iter().enumerate() {
                doc.regions.push(Region {
                    instance_id: i as u32 + 1,
                    subtype: SubtypeClass::TUMOR[i % 5],
                    polygon,
                });
            }
            let (m, inst) = rasterize_annotations(&doc, 12, 15).unwrap();
            let (bm, bi) = brute_force(&doc, 12, 15);
            prop_assert_eq!(m.pixels(), &bm[..]);
            prop_assert_eq!(inst.pixels(), &bi[..]);
        }
    }
}
