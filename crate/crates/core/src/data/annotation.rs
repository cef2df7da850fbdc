//! Polygon annotations of tumor tissue instances.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subtype::SubtypeClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub instance_id: u32,
    pub subtype: SubtypeClass,
    /// Vertices in pixel-corner coordinates: pixel `(x, y)` spans `[x, x+1) x [y, y+1)`.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub slide_id: String,
    pub regions: Vec<Region>,
}

impl AnnotationDocument {
    pub fn new(slide_id: impl Into<String>) -> Self {
        Self {
            slide_id: slide_id.into(),
            regions: Vec::new(),
        }
    }

    /// Checks the document against a `width x height` frame.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("frame {width}x{height} is empty")));
        }
        let mut seen = HashSet::new();
        for region in &self.regions {
            let id = region.instance_id;
            if id == 0 || id > u16::MAX as u32 {
                return Err(Error::Validation(format!(
                    "instance_id {id} outside 1..={}",
                    u16::MAX
                )));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate instance_id {id}")));
            }
            if region.subtype == SubtypeClass::Background {
                return Err(Error::Validation(format!("instance {id} carries the background code")));
            }
            if region.polygon.len() < 3 {
                return Err(Error::Validation(format!(
                    "instance {id}: degenerate polygon with {} vertices",
                    region.polygon.len()
                )));
            }
            for &[x, y] in &region.polygon {
                let inside = x.is_finite()
                    && y.is_finite()
                    && (0.0..=width as f64).contains(&x)
                    && (0.0..=height as f64).contains(&y);
                if !inside {
                    return Err(Error::Validation(format!(
                        "instance {id}: vertex ({x}, {y}) outside the {width}x{height} frame"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: u32, subtype: SubtypeClass) -> Region {
        Region {
            instance_id: id,
            subtype,
            polygon: vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]],
        }
    }

    #[test]
    fn parses_the_documented_json_layout() {
        let doc = AnnotationDocument::from_json(
            r#"{"slide_id": "s1", "regions": [{"instance_id": 4, "subtype": "her2_2", "polygon": [[0,0],[4,0],[4,4]]}]}"#,
        )
        .unwrap();
        assert_eq!(doc.regions[0].subtype, SubtypeClass::Her2Two);
        doc.validate(8, 8).unwrap();
    }

    #[test]
    fn rejects_invalid_regions() {
        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(square(1, SubtypeClass::Background));
        assert!(doc.validate(8, 8).is_err());

        let mut doc = AnnotationDocument::new("s");
        doc.regions.push(square(1, SubtypeClass::Cis));
        doc.regions.push(square(1, SubtypeClass::Cis));
        assert!(doc.validate(8, 8).is_err());

        let mut doc = AnnotationDocument::new("s");
        let mut r = square(9, SubtypeClass::Cis);
        r.polygon.truncate(2);
        doc.regions.push(r);
        let err = doc.validate(8, 8).unwrap_err().to_string();
        assert!(err.contains("instance 9"), "{err}");

        let mut doc = AnnotationDocument::new("s");
        let mut r = square(2, SubtypeClass::Cis);
        r.polygon[0] = [9.0, 1.0];
        doc.regions.push(r);
        assert!(doc.validate(8, 8).is_err());
    }
}
