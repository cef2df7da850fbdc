//! Subtype-balanced synthetic data for HER2 tumor segmentation.
//!
//! Numeric code is generic over [`histosynth_tensor::Scalar`]; the aliases
//! below fix it to `f32`, which is what the pipeline runs in.

pub mod balance;
mod checkpoint;
pub mod convert;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
mod error;
pub mod eval;
pub mod gan;
pub mod harness;
mod layers;
pub mod segmentation;
pub mod staining;
pub mod subtype;

pub use error::{Error, Result};
pub use data::{DatasetItem, InstanceMap, LabeledPatch, RgbImage, SubtypeMask};
pub use subtype::{SubtypeClass, NUM_CLASSES};

/// Default dataset root override.
pub const DATA_ROOT_ENV: &str = "HISTOSYNTH_DATA_ROOT";

pub type SpadeGan32 = gan::SpadeGan<f32>;
pub type GanTrainer32 = gan::GanTrainer<f32>;
pub type VqAutoencoder32 = diffusion::VqAutoencoder<f32>;
pub type AeTrainer32 = diffusion::AeTrainer<f32>;
pub type LatentDiffusion32 = diffusion::LatentDiffusion<f32>;
pub type LdmTrainer32 = diffusion::LdmTrainer<f32>;
pub type Segmenter32 = segmentation::Segmenter<f32>;
pub type SegRun32 = segmentation::SegRun<f32>;
