//! Binary tumor segmentation.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{dice_ce_loss, dice_ce_loss_with_grad, LossTerms, LossWeights, CE_CLAMP, DICE_SMOOTH};
pub use model::SegConfig;
pub use train::{predict_mask, score_patches, train_segmenter, BinaryPrediction, EpochRecord, SegRun, SegTrainer, Segmenter, SetScore};
