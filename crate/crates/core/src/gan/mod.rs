//! Mask-conditioned image synthesis with a SPADE generator.

pub mod model;
pub mod spade;
pub mod train;

pub use model::{GanConfig, GanLossWeights, SpadeGan};
pub use spade::{spade_modulation, SpadeHead};
pub use train::{gan_generate, train_gan, GanStepLosses, GanTrainer, StyleVector};
