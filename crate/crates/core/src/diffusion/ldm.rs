//! Training, sampling and inpainting for the mask-conditioned latent diffusion model.

use std::path::Path;

use histosynth_tensor::{seeded, Adam, AdamConfig, Container, Graph, ParamStore, Scalar, SeededRng, Tensor};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_params, meta, params_with_prefix, to_json};
use crate::convert::masks_to_one_hot;
use crate::data::grid::{Grid, InstanceMap, RgbImage, SubtypeMask};
use crate::data::patch::LabeledPatch;
use crate::diagnostics::ensure_finite;
use crate::diffusion::autoencoder::VqAutoencoder;
use crate::diffusion::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::geometry::{check_divisible, downsample_mask, known_latent_positions};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};

pub const LDM_KIND: &str = "latent-diffusion";
const RNG_SALT: u64 = 0x6c64_6d5f_7472_6169;
const ENCODE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// One-hot mask at latent resolution concatenated to the noisy latent.
    SpatialConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Every timestep from `T` down to 1.
    Ancestral,
    /// `sample_steps` evenly spaced timesteps with matching posterior variances.
    Strided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmConfig {
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserConfig,
    pub conditioning: Conditioning,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub sampler: Sampler,
    pub sample_steps: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid default schedule"),
            denoiser: DenoiserConfig::default(),
            conditioning: Conditioning::SpatialConcat,
            learning_rate: 1e-6,
            batch_size: 16,
            steps: 2000,
            sampler: Sampler::Strided,
            sample_steps: 50,
        }
    }
}

impl LdmConfig {
    /// Short schedule for CPU-sized runs.
    pub fn desk() -> Self {
        Self {
            schedule: NoiseSchedule::linear(200, 1e-4, 0.02).expect("valid desk schedule"),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.schedule.steps() {
            return Err(Error::Config(format!(
                "sample_steps {} must lie in 1..={}",
                self.sample_steps,
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    fn timesteps(&self) -> Result<Vec<usize>> {
        match self.sampler {
            Sampler::Ancestral => Ok((1..=self.schedule.steps()).rev().collect()),
            Sampler::Strided => self.schedule.respaced(self.sample_steps),
        }
    }
}

/// The autoencoder properties a diffusion checkpoint depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeSignature {
    pub compression_factor: usize,
    pub latent_channels: usize,
    pub fingerprint: String,
}

impl AeSignature {
    pub fn of<T: Scalar>(ae: &VqAutoencoder<T>) -> Result<Self> {
        Ok(Self {
            compression_factor: ae.config.compression_factor,
            latent_channels: ae.config.latent_channels,
            fingerprint: ae.fingerprint()?,
        })
    }
}

/// Encoded training patches with their masks downsampled to latent resolution.
#[derive(Debug, Clone)]
pub struct LatentSet<T> {
    pub ids: Vec<String>,
    /// One `[1, C, h, w]` tensor per patch, unscaled.
    pub latents: Vec<Tensor<T>>,
    pub masks: Vec<SubtypeMask>,
}

impl<T: Scalar> LatentSet<T> {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    fn latent_dims(&self) -> Result<(usize, usize, usize)> {
        let first = self.latents.first().ok_or_else(|| Error::Empty("latent set is empty".into()))?;
        let (_, c, h, w) = first.dims4()?;
        Ok((c, h, w))
    }
}

pub fn encode_latents<T: Scalar>(ae: &VqAutoencoder<T>, patches: &[LabeledPatch]) -> Result<LatentSet<T>> {
    let f = ae.config.compression_factor;
    let mut set = LatentSet {
        ids: Vec::with_capacity(patches.len()),
        latents: Vec::with_capacity(patches.len()),
        masks: Vec::with_capacity(patches.len()),
    };
    for chunk in patches.chunks(ENCODE_CHUNK) {
        let images: Vec<&RgbImage> = chunk.iter().map(|p| &p.image).collect();
        let z = ae.encode(&images)?;
        for (i, p) in chunk.iter().enumerate() {
            set.ids.push(p.id());
            set.latents.push(z.batch_item(i)?);
            set.masks.push(downsample_mask(&p.mask, f)?);
        }
    }
    Ok(set)
}

/// Denoiser weights plus everything needed to sample from them.
#[derive(Debug, Clone)]
pub struct LatentDiffusion<T> {
    pub config: LdmConfig,
    pub ae: AeSignature,
    /// Multiplier bringing encoder outputs to roughly unit variance.
    pub latent_scale: f64,
    /// Latent `(height, width)` the model was trained at.
    pub latent_size: (usize, usize),
    pub params: ParamStore<T>,
    denoiser: Denoiser,
}

impl<T: Scalar> LatentDiffusion<T> {
    pub fn new(config: LdmConfig, ae: AeSignature, latent_scale: f64, latent_size: (usize, usize), seed: u64) -> Result<Self> {
        config.validate()?;
        config.denoiser.check_latent_size(latent_size.0, latent_size.1)?;
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::Config(format!("latent scale {latent_scale} must be positive")));
        }
        let mut params = ParamStore::new();
        let denoiser = Denoiser::new(&mut params, &config.denoiser, ae.latent_channels, &mut seeded(seed))?;
        Ok(Self {
            config,
            ae,
            latent_scale,
            latent_size,
            params,
            denoiser,
        })
    }

    /// Errors unless `ae` has the compression factor and latent width this model was trained on.
    pub fn check_autoencoder(&self, ae: &VqAutoencoder<T>) -> Result<()> {
        let (f, c) = (ae.config.compression_factor, ae.config.latent_channels);
        if f != self.ae.compression_factor || c != self.ae.latent_channels {
            return Err(Error::Checkpoint(format!(
                "diffusion model expects an autoencoder with factor {} and {} latent channels, got factor {f} and {c}",
                self.ae.compression_factor, self.ae.latent_channels
            )));
        }
        if ae.fingerprint()? != self.ae.fingerprint {
            warn!("autoencoder weights differ from the ones the diffusion model was trained with");
        }
        Ok(())
    }

    fn check_mask(&self, mask: &SubtypeMask) -> Result<()> {
        let f = self.ae.compression_factor;
        let (w, h) = mask.dims();
        check_divisible(w, h, f)?;
        if (h / f, w / f) != self.latent_size {
            return Err(Error::Shape(format!(
                "mask {w}x{h} does not match the trained {}x{} image size",
                self.latent_size.1 * f,
                self.latent_size.0 * f
            )));
        }
        Ok(())
    }

    fn predict_noise(&self, x: &Tensor<T>, cond: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let n = x.dims4()?.0;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
        let eps = self.denoiser.forward(&mut g, &p, xv, cv, &vec![t; n])?;
        Ok(g.value(eps).clone())
    }

    /// Mean squared noise-prediction error over `draws` random
    /// `(latent, t, noise)` triples from `set`; no parameters change.
    pub fn noise_mse(&self, set: &LatentSet<T>, draws: usize, seed: u64) -> Result<f64> {
        if set.is_empty() || draws == 0 {
            return Err(Error::Empty("noise error needs latents and draws".into()));
        }
        let mut rng = seeded(seed);
        let scale = T::lit(self.latent_scale);
        let big_t = self.config.schedule.steps();
        let (mut total, mut count) = (0.0, 0usize);
        let mut left = draws;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..set.len())).collect();
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=big_t)).collect();
            let mut noisy = Vec::with_capacity(n);
            let mut noises = Vec::with_capacity(n);
            for (&i, &t) in picks.iter().zip(&ts) {
                let x0 = set.latents[i].map(|v| v * scale);
                let eps = Tensor::randn(x0.shape(), T::one(), &mut rng);
                noisy.push(self.config.schedule.q_forward(&x0, t, &eps)?);
                noises.push(eps);
            }
            let cond = masks_to_one_hot(&picks.iter().map(|&i| &set.masks[i]).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = g.bind_frozen(&self.params);
            let (xv, cv) = (g.constant(Tensor::stack_batch(&noisy)?), g.constant(cond));
            let pred = self.denoiser.forward(&mut g, &p, xv, cv, &ts)?;
            let eps = Tensor::stack_batch(&noises)?;
            for (a, b) in g.value(pred).data().iter().zip(eps.data()) {
                let d = a.as_f64() - b.as_f64();
                total += d * d;
            }
            count += eps.numel();
        }
        Ok(total / count as f64)
    }

    /// Reverse process from `x` at timestep `T`; `known` holds scaled clean
    /// latents and the positions to keep pinned to their noised versions.
    fn reverse(
        &self,
        mut x: Tensor<T>,
        cond: &Tensor<T>,
        rngs: &mut [SeededRng],
        known: Option<(&Tensor<T>, &[Grid<bool>])>,
    ) -> Result<Tensor<T>> {
        let schedule = &self.config.schedule;
        let taus = self.config.timesteps()?;
        for (i, &t) in taus.iter().enumerate() {
            let s = taus.get(i + 1).copied().unwrap_or(0);
            let eps = self.predict_noise(&x, cond, t)?;
            let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
            let (a, b) = (T::lit(1.0 / ab_t.sqrt()), T::lit((1.0 - ab_t).sqrt()));
            let x0 = x.zip_map(&eps, |xt, e| (xt - b * e) * a)?;
            x = if s == 0 {
                x0
            } else {
                let alpha = ab_t / ab_s;
                let beta = 1.0 - alpha;
                let c0 = T::lit(ab_s.sqrt() * beta / (1.0 - ab_t));
                let ct = T::lit(alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t));
                let sigma = T::lit((beta * (1.0 - ab_s) / (1.0 - ab_t)).sqrt());
                let z = per_sample_noise(rngs, x.shape())?;
                let mean = x0.zip_map(&x, |p, q| c0 * p + ct * q)?;
                mean.zip_map(&z, |m, e| m + sigma * e)?
            };
            if let Some((z0, positions)) = known {
                x = self.pin_known(x, z0, positions, s, rngs)?;
            }
        }
        Ok(x)
    }

    fn pin_known(&self, x: Tensor<T>, z0: &Tensor<T>, positions: &[Grid<bool>], t: usize, rngs: &mut [SeededRng]) -> Result<Tensor<T>> {
        let noise = if t == 0 { Tensor::zeros(z0.shape()) } else { per_sample_noise(rngs, z0.shape())? };
        let noised = self.config.schedule.q_forward(z0, t, &noise)?;
        let (n, c, h, w) = x.dims4()?;
        let mut out = x;
        for b in 0..n {
            for ch in 0..c {
                for (i, &keep) in positions[b].pixels().iter().enumerate() {
                    if keep {
                        let k = ((b * c + ch) * h * w) + i;
                        out.data_mut()[k] = noised.data()[k];
                    }
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, ae: &VqAutoencoder<T>, x: &Tensor<T>) -> Result<Vec<RgbImage>> {
        let inv = T::lit(1.0 / self.latent_scale);
        ae.decode(&x.map(|v| v * inv))
    }

    fn initial_noise(&self, rngs: &mut [SeededRng]) -> Result<Tensor<T>> {
        let (h, w) = self.latent_size;
        per_sample_noise(rngs, &[rngs.len(), self.ae.latent_channels, h, w])
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container<T>> {
        let mut meta = serde_json::json!({
            "config": to_json(&self.config)?,
            "ae": to_json(&self.ae)?,
            "latent_scale": self.latent_scale,
            "latent_size": [self.latent_size.0, self.latent_size.1],
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut c = Container::new(LDM_KIND, meta);
        c.extend(params_with_prefix(&self.params, "den/"));
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        checkpoint::expect_kind(c, LDM_KIND)?;
        let size: [usize; 2] = meta(c, "latent_size")?;
        let mut ldm = Self::new(meta(c, "config")?, meta(c, "ae")?, meta(c, "latent_scale")?, (size[0], size[1]), 0)?;
        load_params(&mut ldm.params, c, "den/")?;
        Ok(ldm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, LDM_KIND)?)
    }
}

fn per_sample_noise<T: Scalar>(rngs: &mut [SeededRng], shape: &[usize]) -> Result<Tensor<T>> {
    let item = [1, shape[1], shape[2], shape[3]];
    let parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(&item, T::one(), r)).collect();
    Ok(Tensor::stack_batch(&parts)?)
}

/// Pixel set covered by tumor instances.
pub fn tumor_region(instances: &InstanceMap) -> Grid<bool> {
    instances.map(|id| id > 0)
}

/// Generates one image conditioned on `mask`.
pub fn ldm_sample<T: Scalar>(ldm: &LatentDiffusion<T>, ae: &VqAutoencoder<T>, mask: &SubtypeMask, seed: u64) -> Result<RgbImage> {
    Ok(ldm_sample_batch(ldm, ae, &[(mask, seed)])?.remove(0))
}

/// Samples several `(mask, seed)` pairs at once; each result equals the
/// corresponding single [`ldm_sample`] call.
pub fn ldm_sample_batch<T: Scalar>(
    ldm: &LatentDiffusion<T>,
    ae: &VqAutoencoder<T>,
    requests: &[(&SubtypeMask, u64)],
) -> Result<Vec<RgbImage>> {
    ldm.check_autoencoder(ae)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let f = ldm.ae.compression_factor;
    let mut coarse = Vec::with_capacity(requests.len());
    for (mask, _) in requests {
        ldm.check_mask(mask)?;
        coarse.push(downsample_mask(mask, f)?);
    }
    let cond = masks_to_one_hot(&coarse.iter().collect::<Vec<_>>())?;
    let mut rngs: Vec<SeededRng> = requests.iter().map(|(_, s)| seeded(*s)).collect();
    let x = ldm.initial_noise(&mut rngs)?;
    let x = ldm.reverse(x, &cond, &mut rngs, None)?;
    ldm.decode(ae, &x)
}

/// Resynthesizes the pixels in `region` under `mask` while keeping every
/// other pixel of `image` unchanged.
pub fn ldm_inpaint<T: Scalar>(
    ldm: &LatentDiffusion<T>,
    ae: &VqAutoencoder<T>,
    image: &RgbImage,
    mask: &SubtypeMask,
    region: &Grid<bool>,
    seed: u64,
) -> Result<RgbImage> {
    ldm.check_autoencoder(ae)?;
    if image.dims() != mask.dims() || region.dims() != mask.dims() {
        return Err(Error::Shape("image, mask and region must share a size".into()));
    }
    ldm.check_mask(mask)?;
    if !region.pixels().iter().any(|&r| r) {
        warn!("inpainting region is empty; returning the input unchanged");
        return Ok(image.clone());
    }
    let f = ldm.ae.compression_factor;
    let cond = masks_to_one_hot(&[&downsample_mask(mask, f)?])?;
    let scale = T::lit(ldm.latent_scale);
    let z0 = ae.encode(&[image])?.map(|v| v * scale);
    let known = [known_latent_positions(region, f)?];
    let mut rngs = [seeded(seed)];
    let x = ldm.initial_noise(&mut rngs)?;
    let x = ldm.pin_known(x, &z0, &known, ldm.config.schedule.steps(), &mut rngs)?;
    let x = ldm.reverse(x, &cond, &mut rngs, Some((&z0, &known)))?;
    let generated = ldm.decode(ae, &x)?.remove(0);
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if region.get(x, y) {
            generated.get(x, y)
        } else {
            image.get(x, y)
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdmStepLoss {
    pub step: u64,
    pub loss: f64,
}

/// Diffusion run state: model, optimizer and the batch/noise stream.
#[derive(Debug, Clone)]
pub struct LdmTrainer<T> {
    pub ldm: LatentDiffusion<T>,
    opt: Adam<T>,
    step: u64,
    rng: SeededRng,
    pub history: Vec<LdmStepLoss>,
}

impl<T: Scalar> LdmTrainer<T> {
    /// The latent scale is fixed here from the statistics of `set`.
    pub fn new(config: LdmConfig, ae: &VqAutoencoder<T>, set: &LatentSet<T>, seed: u64) -> Result<Self> {
        let (c, h, w) = set.latent_dims()?;
        if c != ae.config.latent_channels {
            return Err(Error::Checkpoint(format!(
                "latents have {c} channels, autoencoder produces {}",
                ae.config.latent_channels
            )));
        }
        let ldm = LatentDiffusion::new(config, AeSignature::of(ae)?, latent_scale(set), (h, w), seed)?;
        Ok(Self {
            opt: Adam::new(&ldm.params, AdamConfig::with_lr(ldm.config.learning_rate)),
            ldm,
            step: 0,
            rng: seeded(seed ^ RNG_SALT),
            history: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn train(&mut self, set: &LatentSet<T>, steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        let (c, h, w) = set.latent_dims()?;
        if c != self.ldm.ae.latent_channels || (h, w) != self.ldm.latent_size {
            return Err(Error::Shape(format!(
                "latent set is {c}x{h}x{w}, model expects {}x{}x{}",
                self.ldm.ae.latent_channels, self.ldm.latent_size.0, self.ldm.latent_size.1
            )));
        }
        for _ in 0..steps {
            let loss = self.train_step(set)?;
            self.history.push(loss);
        }
        Ok(())
    }

    fn train_step(&mut self, set: &LatentSet<T>) -> Result<LdmStepLoss> {
        let big_t = self.ldm.config.schedule.steps();
        let n = self.ldm.config.batch_size;
        let step = self.step + 1;
        let picks: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..set.len())).collect();
        let ts: Vec<usize> = (0..n).map(|_| self.rng.random_range(1..=big_t)).collect();
        let scale = T::lit(self.ldm.latent_scale);
        let mut noisy = Vec::with_capacity(n);
        let mut noises = Vec::with_capacity(n);
        for (&i, &t) in picks.iter().zip(&ts) {
            let x0 = set.latents[i].map(|v| v * scale);
            let eps = Tensor::randn(x0.shape(), T::one(), &mut self.rng);
            noisy.push(self.ldm.config.schedule.q_forward(&x0, t, &eps)?);
            noises.push(eps);
        }
        let x_t = Tensor::stack_batch(&noisy)?;
        let eps = Tensor::stack_batch(&noises)?;
        let cond = masks_to_one_hot(&picks.iter().map(|&i| &set.masks[i]).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let p = g.bind(&self.ldm.params);
        let (xv, cv, ev) = (g.constant(x_t.clone()), g.constant(cond), g.constant(eps));
        let pred = self.ldm.denoiser.forward(&mut g, &p, xv, cv, &ts)?;
        let loss = g.mse(pred, ev)?;
        let value = g.value(loss).data()[0].as_f64();
        let ids: Vec<String> = picks.iter().map(|&i| set.ids[i].clone()).collect();
        ensure_finite(step, &[("noise_mse", value)], &ids, &x_t)?;
        let mut grads = g.backward(loss)?;
        let grads = p.grads(&mut grads, &self.ldm.params);
        drop(g);
        self.opt.step(&mut self.ldm.params, &grads)?;
        self.step = step;
        Ok(LdmStepLoss { step, loss: value })
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        let mut c = self.ldm.to_container(serde_json::json!({
            "step": self.step,
            "rng": checkpoint::rng_meta(&self.rng)?,
            "history": to_json(&self.history)?,
        }))?;
        checkpoint::save_adam(&mut c, &self.opt, &self.ldm.params, "opt/");
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let ldm = LatentDiffusion::from_container(c)?;
        let step: u64 = meta(c, "step")?;
        Ok(Self {
            opt: checkpoint::load_adam(c, &ldm.params, AdamConfig::with_lr(ldm.config.learning_rate), step, "opt/")?,
            ldm,
            step,
            rng: checkpoint::rng_from_meta(c, "rng")?,
            history: meta(c, "history")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, LDM_KIND)?)
    }
}

/// Reciprocal standard deviation over every latent element of `set`.
pub fn latent_scale<T: Scalar>(set: &LatentSet<T>) -> f64 {
    let values = set.latents.iter().flat_map(|z| z.data().iter().map(|v| v.as_f64()));
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        sum += v;
        sq += v * v;
    }
    let var = (sq / n - (sum / n).powi(2)).max(0.0);
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Trains a fresh diffusion model for `config.steps` steps.
pub fn train_ldm<T: Scalar>(set: &LatentSet<T>, config: LdmConfig, ae: &VqAutoencoder<T>, seed: u64) -> Result<LdmTrainer<T>> {
    let steps = config.steps;
    let mut t = LdmTrainer::new(config, ae, set, seed)?;
    t.train(set, steps)?;
    Ok(t)
}
