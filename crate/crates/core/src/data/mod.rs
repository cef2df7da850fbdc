//! Tissue data: grids, annotations, rasterization, patches, splits and
//! on-disk datasets.

pub mod annotation;
pub mod dataset;
pub mod grid;
pub mod patch;
pub mod phantom;
pub mod raster;
pub mod split;

pub use annotation::{AnnotationDocument, Region};
pub use dataset::{
    load_dataset, mask_hash, read_manifest, split_items, write_dataset, DatasetItem, Manifest, Method,
    PatchRecord, Provenance, SlideRecord,
};
pub use grid::{Grid, InstanceMap, RgbImage, SubtypeMask};
pub use patch::{extract_patches, patch_count, InstanceInfo, LabeledPatch, Slide};
pub use phantom::{
    generate_phantom_dataset, generate_phantom_slide, generate_phantom_slide_weighted, PhantomDataset,
    PhantomDatasetConfig, PhantomSlide,
};
pub use raster::rasterize_annotations;
pub use split::{make_split, SplitMap, SplitName};
