//! Mask-conditioned latent diffusion over a vector-quantized autoencoder.

pub mod autoencoder;
pub mod denoiser;
pub mod geometry;
pub mod ldm;
pub mod schedule;

pub use autoencoder::{ae_decode, ae_encode, psnr, train_autoencoder, AeStepLosses, AeTrainer, AutoencoderConfig, VqAutoencoder};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use geometry::{downsample_mask, known_latent_positions};
pub use ldm::{
    encode_latents, latent_scale, ldm_inpaint, ldm_sample, ldm_sample_batch, train_ldm, tumor_region, AeSignature, Conditioning,
    LatentDiffusion, LatentSet, LdmConfig, LdmStepLoss, LdmTrainer, Sampler,
};
pub use schedule::NoiseSchedule;
