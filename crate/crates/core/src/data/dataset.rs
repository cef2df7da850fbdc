//! On-disk dataset roots: PNG arrays plus a JSON manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/patches/<id>/image.png      8-bit RGB
//! <root>/patches/<id>/mask.png       8-bit grey, subtype codes 0..=5
//! <root>/patches/<id>/instances.png  16-bit grey, instance ids
//! ```
//! All paths inside the manifest are relative to the root.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::grid::{InstanceMap, RgbImage, SubtypeMask};
use crate::data::patch::LabeledPatch;
use crate::data::split::{SplitMap, SplitName};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Real,
    Gan,
    Diffusion,
    Inpaint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Real => "real",
            Method::Gan => "gan",
            Method::Diffusion => "diffusion",
            Method::Inpaint => "inpaint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_patch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_hash: Option<String>,
}

impl Provenance {
    pub fn real() -> Self {
        Self {
            method: Method::Real,
            source_patch: None,
            seed: None,
            mask_hash: None,
        }
    }
}

/// A patch together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub patch: LabeledPatch,
    pub provenance: Provenance,
}

impl DatasetItem {
    pub fn real(patch: LabeledPatch) -> Self {
        Self {
            id: patch.id(),
            patch,
            provenance: Provenance::real(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_score_bin: Option<u8>,
    pub patches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub slide_id: String,
    pub origin: [usize; 2],
    pub image: String,
    pub mask: String,
    pub instances: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub patch_size: usize,
    pub slides: Vec<SlideRecord>,
    /// Slide id to split; empty for synthetic pools.
    #[serde(default)]
    pub split: SplitMap,
    pub patches: Vec<PatchRecord>,
}

impl Manifest {
    /// Ids of the patches whose slide belongs to `split`.
    pub fn patch_ids_in(&self, split: SplitName) -> Vec<String> {
        self.patches
            .iter()
            .filter(|p| self.split.get(&p.slide_id) == Some(&split))
            .map(|p| p.id.clone())
            .collect()
    }

    /// Rejects a split map that assigns a slide to more than one split or
    /// leaves a patch's slide unassigned.
    pub fn check_split(&self) -> Result<()> {
        if self.split.is_empty() {
            return Ok(());
        }
        for p in &self.patches {
            if !self.split.contains_key(&p.slide_id) {
                return Err(Error::Validation(format!(
                    "patch {} belongs to unsplit slide {}",
                    p.id, p.slide_id
                )));
            }
        }
        Ok(())
    }
}

pub fn mask_hash(mask: &SubtypeMask) -> String {
    let mut hasher = Sha256::new();
    hasher.update((mask.width() as u32).to_le_bytes());
    hasher.update((mask.height() as u32).to_le_bytes());
    hasher.update(mask.pixels());
    hex::encode(hasher.finalize())
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = image.pixels().iter().flatten().copied().collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    RgbImage::from_vec(w as usize, h as usize, pixels)
}

pub fn write_mask_png(path: &Path, mask: &SubtypeMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.pixels().to_vec())
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<SubtypeMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    SubtypeMask::from_vec(w as usize, h as usize, img.into_raw())
}

pub fn write_instances_png(path: &Path, instances: &InstanceMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(
        instances.width() as u32,
        instances.height() as u32,
        instances.pixels().to_vec(),
    )
    .ok_or_else(|| Error::Shape("instance buffer size".into()))?;
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn read_instances_png(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    InstanceMap::from_vec(w as usize, h as usize, img.into_raw())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    Ok(())
}

/// Writes `items` under `root` and returns the manifest (also written).
pub fn write_dataset(
    root: &Path,
    items: &[DatasetItem],
    slides: Vec<SlideRecord>,
    split: SplitMap,
) -> Result<Manifest> {
    fs::create_dir_all(root).at(root)?;
    let patch_size = items.first().map_or(0, |i| i.patch.size().0);
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let dir = format!("patches/{}", item.id);
        let rec = PatchRecord {
            id: item.id.clone(),
            slide_id: item.patch.slide_id.clone(),
            origin: [item.patch.origin.0, item.patch.origin.1],
            image: format!("{dir}/image.png"),
            mask: format!("{dir}/mask.png"),
            instances: format!("{dir}/instances.png"),
            provenance: item.provenance.clone(),
        };
        write_rgb_png(&root.join(&rec.image), &item.patch.image)?;
        write_mask_png(&root.join(&rec.mask), &item.patch.mask)?;
        write_instances_png(&root.join(&rec.instances), &item.patch.instances)?;
        records.push(rec);
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        patch_size,
        slides,
        split,
        patches: records,
    };
    manifest.check_split()?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    manifest.check_split()?;
    Ok(manifest)
}

pub fn load_item(root: &Path, rec: &PatchRecord) -> Result<DatasetItem> {
    let patch = LabeledPatch::new(
        read_rgb_png(&root.join(&rec.image))?,
        read_mask_png(&root.join(&rec.mask))?,
        read_instances_png(&root.join(&rec.instances))?,
        rec.slide_id.clone(),
        (rec.origin[0], rec.origin[1]),
    )?;
    Ok(DatasetItem {
        id: rec.id.clone(),
        patch,
        provenance: rec.provenance.clone(),
    })
}

/// Loads the manifest and every patch of a dataset root.
pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<DatasetItem>)> {
    let manifest = read_manifest(root)?;
    let items = manifest
        .patches
        .iter()
        .map(|rec| load_item(root, rec))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}

/// Patches of one split, in manifest order.
pub fn split_items(manifest: &Manifest, items: &[DatasetItem], split: SplitName) -> Vec<DatasetItem> {
    items
        .iter()
        .filter(|i| manifest.split.get(&i.patch.slide_id) == Some(&split))
        .cloned()
        .collect()
}

pub fn dataset_root_or(default: PathBuf, env_var: &str) -> PathBuf {
    std::env::var_os(env_var).map(PathBuf::from).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::generate_phantom_slide;

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom_slide(4, 64, 3).unwrap();
        let patch = LabeledPatch::new(s.image, s.mask, s.instances, "slideA", (0, 0)).unwrap();
        let mut item = DatasetItem::real(patch);
        item.provenance = Provenance {
            method: Method::Diffusion,
            source_patch: Some("slideA_0_0".into()),
            seed: Some(9),
            mask_hash: Some(mask_hash(&item.patch.mask)),
        };
        let mut split = SplitMap::new();
        split.insert("slideA".into(), SplitName::Test);
        let slides = vec![SlideRecord {
            slide_id: "slideA".into(),
            aggregate_score_bin: Some(2),
            patches: vec![item.id.clone()],
        }];
        write_dataset(dir.path(), std::slice::from_ref(&item), slides, split).unwrap();
        let (manifest, items) = load_dataset(dir.path()).unwrap();
        assert_eq!(items, vec![item]);
        assert_eq!(manifest.patch_ids_in(SplitName::Test), vec!["slideA_0_0".to_string()]);
        assert!(manifest.patch_ids_in(SplitName::Train).is_empty());
    }

    #[test]
    fn sixteen_bit_instance_ids_survive_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.png");
        let map = InstanceMap::from_fn(4, 2, |x, y| (x * 1000 + y * 20000) as u16);
        write_instances_png(&path, &map).unwrap();
        assert_eq!(read_instances_png(&path).unwrap(), map);
    }

    #[test]
    fn unsplit_patch_is_rejected() {
        let s = generate_phantom_slide(4, 64, 0).unwrap();
        let item = DatasetItem::real(LabeledPatch::new(s.image, s.mask, s.instances, "a", (0, 0)).unwrap());
        let mut split = SplitMap::new();
        split.insert("other".into(), SplitName::Train);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_dataset(dir.path(), &[item], vec![], split).is_err());
    }
}
