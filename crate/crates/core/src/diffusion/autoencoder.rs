//! Vector-quantized convolutional autoencoder.
//!
//! The encoder output is a continuous latent; the diffusion model works on
//! that. Decoding always snaps each latent vector to its nearest codebook
//! entry first.

use std::path::Path;

use histosynth_tensor::nn::{Conv2d, Init};
use histosynth_tensor::{seeded, Adam, AdamConfig, Bound, Container, Graph, ParamStore, Scalar, SeededRng, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, load_params, meta, params_with_prefix, to_json};
use crate::convert::{images_to_tensor, tensor_to_images};
use crate::data::grid::RgbImage;
use crate::diagnostics::ensure_finite;
use crate::diffusion::geometry::check_divisible;
use crate::error::{Error, Result};
use crate::layers::ResBlock;

pub const AE_KIND: &str = "vq-autoencoder";
const RNG_SALT: u64 = 0x7671_5f61_6575_7472;
const KMEANS_ITERS: usize = 15;
const DEAD_CODE_COUNT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    /// Spatial downsampling factor; a power of two.
    pub compression_factor: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    /// Channels after the stem; doubled per downsampling up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Side of the random training crops (0 trains on whole images).
    pub crop_size: usize,
    /// Steps trained without quantization before the codebook is initialized.
    pub warmup_steps: u64,
    pub commitment: f64,
    pub ema_decay: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            compression_factor: 4,
            latent_channels: 3,
            codebook_size: 256,
            base_channels: 16,
            max_channels: 64,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 2000,
            crop_size: 32,
            warmup_steps: 1000,
            commitment: 0.25,
            ema_decay: 0.99,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.compression_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("compression factor {f} must be a power of two >= 2")));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("channel counts and batch size must be positive".into()));
        }
        if self.crop_size != 0 && !self.crop_size.is_multiple_of(f) {
            return Err(Error::Config("crop_size must be a multiple of the compression factor".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.compression_factor.trailing_zeros() as usize
    }

    fn width(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    down: Vec<(Conv2d, ResBlock)>,
    out: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    stem: Conv2d,
    mid: ResBlock,
    up: Vec<(Conv2d, Option<ResBlock>)>,
    out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct VqAutoencoder<T> {
    pub config: AutoencoderConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    /// `[codebook_size, latent_channels]`.
    pub codebook: Tensor<T>,
}

impl<T: Scalar> VqAutoencoder<T> {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let levels = config.levels();
        let c = |l| config.width(l);
        let encoder = Encoder {
            stem: Conv2d::new(&mut params, "enc.stem", 3, c(0), 3, &mut rng),
            down: (0..levels)
                .map(|l| {
                    let conv = Conv2d::with(&mut params, &format!("enc.down{l}"), c(l), c(l + 1), 3, 2, 1, Init::He(1.0), &mut rng);
                    let block = ResBlock::new(&mut params, &format!("enc.block{l}"), c(l + 1), c(l + 1), None, None, &mut rng);
                    (conv, block)
                })
                .collect(),
            out: Conv2d::with(&mut params, "enc.out", c(levels), config.latent_channels, 1, 1, 0, Init::He(0.5), &mut rng),
        };
        let decoder = Decoder {
            stem: Conv2d::new(&mut params, "dec.stem", config.latent_channels, c(levels), 3, &mut rng),
            mid: ResBlock::new(&mut params, "dec.mid", c(levels), c(levels), None, None, &mut rng),
            up: (0..levels)
                .rev()
                .map(|l| {
                    let conv = Conv2d::new(&mut params, &format!("dec.up{l}"), c(l + 1), c(l), 3, &mut rng);
                    let block = (l > 0).then(|| ResBlock::new(&mut params, &format!("dec.block{l}"), c(l), c(l), None, None, &mut rng));
                    (conv, block)
                })
                .collect(),
            out: Conv2d::new(&mut params, "dec.out", c(0), 3, 3, &mut rng),
        };
        let codebook = Tensor::randn(&[config.codebook_size, config.latent_channels], T::one(), &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            codebook,
        })
    }

    fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.encoder.stem.forward(g, p, x)?;
        for (conv, block) in &self.encoder.down {
            let a = g.silu(h);
            h = conv.forward(g, p, a)?;
            h = block.forward(g, p, h, None)?;
        }
        let a = g.silu(h);
        Ok(self.encoder.out.forward(g, p, a)?)
    }

    fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.decoder.stem.forward(g, p, z)?;
        let mut h = self.decoder.mid.forward(g, p, h, None)?;
        for (conv, block) in &self.decoder.up {
            let u = g.upsample2(h)?;
            let a = g.silu(u);
            h = conv.forward(g, p, a)?;
            if let Some(b) = block {
                h = b.forward(g, p, h, None)?;
            }
        }
        let a = g.silu(h);
        Ok(self.decoder.out.forward(g, p, a)?)
    }

    fn check_image_size(&self, w: usize, h: usize) -> Result<()> {
        check_divisible(w, h, self.config.compression_factor)
    }

    /// Continuous latents `[N, C, H/f, W/f]` for a batch of same-size images.
    pub fn encode_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        self.check_image_size(w, h)?;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn encode(&self, images: &[&RgbImage]) -> Result<Tensor<T>> {
        self.encode_tensor(&images_to_tensor(images)?)
    }

    /// Nearest-codebook replacement of every latent vector, plus the chosen indices.
    pub fn quantize(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (n, c, h, w) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, codebook expects {}",
                self.config.latent_channels
            )));
        }
        let plane = h * w;
        let mut out = z.clone();
        let mut indices = Vec::with_capacity(n * plane);
        let book = self.codebook.data();
        let d = z.data();
        let mut v = vec![T::zero(); c];
        for b in 0..n {
            for i in 0..plane {
                for ch in 0..c {
                    v[ch] = d[(b * c + ch) * plane + i];
                }
                let k = nearest(book, c, &v);
                indices.push(k);
                for ch in 0..c {
                    out.data_mut()[(b * c + ch) * plane + i] = book[k * c + ch];
                }
            }
        }
        Ok((out, indices))
    }

    /// Decoded pixels in `[-1, 1]` after quantization.
    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (zq, _) = self.quantize(z)?;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let zv = g.constant(zq);
        let x = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Vec<RgbImage>> {
        tensor_to_images(&self.decode_tensor(z)?)
    }

    pub fn reconstruct(&self, image: &RgbImage) -> Result<RgbImage> {
        let z = self.encode(&[image])?;
        Ok(self.decode(&z)?.remove(0))
    }

    /// Content hash of configuration, weights and codebook.
    pub fn fingerprint(&self) -> Result<String> {
        let c = self.weights_container(serde_json::json!({ "config": to_json(&self.config)? }));
        Ok(hex::encode(Sha256::digest(c.to_bytes()?)))
    }

    fn weights_container(&self, meta: serde_json::Value) -> Container<T> {
        let mut c = Container::new(AE_KIND, meta);
        c.extend(params_with_prefix(&self.params, "ae/"));
        c.push("codebook", self.codebook.clone());
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        checkpoint::expect_kind(c, AE_KIND)?;
        let config: AutoencoderConfig = meta(c, "config")?;
        let mut ae = Self::new(config, 0)?;
        load_params(&mut ae.params, c, "ae/")?;
        let book = c
            .get("codebook")
            .ok_or_else(|| Error::Checkpoint("autoencoder checkpoint lacks a codebook".into()))?;
        book.expect_same_shape(&ae.codebook)?;
        ae.codebook = book.clone();
        Ok(ae)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, AE_KIND)?)
    }

    /// Writes weights and codebook without training state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = self.weights_container(serde_json::json!({ "config": to_json(&self.config)? }));
        Ok(c.save(path)?)
    }
}

fn nearest<T: Scalar>(book: &[T], c: usize, v: &[T]) -> usize {
    let mut best = (0, T::infinity());
    for (k, e) in book.chunks_exact(c).enumerate() {
        let d: T = e.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Encodes one image to its continuous latent `[1, C, H/f, W/f]`.
pub fn ae_encode<T: Scalar>(ae: &VqAutoencoder<T>, image: &RgbImage) -> Result<Tensor<T>> {
    ae.encode(&[image])
}

/// Quantizes and decodes a single latent `[1, C, h, w]`.
pub fn ae_decode<T: Scalar>(ae: &VqAutoencoder<T>, latent: &Tensor<T>) -> Result<RgbImage> {
    if latent.dims4()?.0 != 1 {
        return Err(Error::Shape("ae_decode takes a single latent".into()));
    }
    Ok(ae.decode(latent)?.remove(0))
}

/// Peak signal-to-noise ratio in dB between two 8-bit images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape("psnr of differently sized images".into()));
    }
    let n = (a.pixels().len() * 3) as f64;
    let se: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum();
    let mse = se / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (255.0f64.powi(2) / mse).log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeStepLosses {
    pub step: u64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub quantized: bool,
}

/// Autoencoder run state: weights, optimizer, codebook EMA and data order.
#[derive(Debug, Clone)]
pub struct AeTrainer<T> {
    pub ae: VqAutoencoder<T>,
    opt: Adam<T>,
    step: u64,
    rng: SeededRng,
    codebook_ready: bool,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    pub history: Vec<AeStepLosses>,
}

impl<T: Scalar> AeTrainer<T> {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        let ae = VqAutoencoder::new(config, seed)?;
        let (k, c) = (ae.config.codebook_size, ae.config.latent_channels);
        Ok(Self {
            opt: Adam::new(&ae.params, AdamConfig::with_lr(ae.config.learning_rate)),
            ae,
            step: 0,
            rng: seeded(seed ^ RNG_SALT),
            codebook_ready: false,
            ema_counts: vec![0.0; k],
            ema_sums: vec![0.0; k * c],
            history: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn train(&mut self, images: &[RgbImage], steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        if images.is_empty() {
            return Err(Error::Empty("autoencoder training needs images".into()));
        }
        for img in images {
            self.ae.check_image_size(img.width(), img.height())?;
            if self.ae.config.crop_size > img.width().min(img.height()) {
                return Err(Error::Config("crop_size exceeds image size".into()));
            }
        }
        for _ in 0..steps {
            if !self.codebook_ready && self.step >= self.ae.config.warmup_steps {
                self.init_codebook(images)?;
            }
            let (batch, ids) = self.draw_batch(images);
            let losses = self.train_step(&batch, &ids)?;
            self.history.push(losses);
        }
        Ok(())
    }

    fn draw_batch(&mut self, images: &[RgbImage]) -> (Tensor<T>, Vec<String>) {
        let cfg = &self.ae.config;
        let f = cfg.compression_factor;
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = self.rng.random_range(0..images.len());
            let img = &images[i];
            let crop = if cfg.crop_size == 0 {
                img.clone()
            } else {
                let x = self.rng.random_range(0..=(img.width() - cfg.crop_size) / f) * f;
                let y = self.rng.random_range(0..=(img.height() - cfg.crop_size) / f) * f;
                ids.push(format!("image{i}@{x},{y}"));
                img.crop(x, y, cfg.crop_size, cfg.crop_size).expect("crop inside image")
            };
            if cfg.crop_size == 0 {
                ids.push(format!("image{i}"));
            }
            crops.push(crop);
        }
        let refs: Vec<&RgbImage> = crops.iter().collect();
        (images_to_tensor(&refs).expect("same-size crops"), ids)
    }

    /// k-means over encoder outputs of a few batches.
    fn init_codebook(&mut self, images: &[RgbImage]) -> Result<()> {
        let c = self.ae.config.latent_channels;
        let k = self.ae.config.codebook_size;
        let mut points: Vec<Vec<f64>> = Vec::new();
        while points.len() < 16 * k {
            let (batch, _) = self.draw_batch(images);
            let z = self.ae.encode_tensor(&batch)?;
            points.extend(latent_vectors(&z));
        }
        let mut centers: Vec<Vec<f64>> = rand::seq::index::sample(&mut self.rng, points.len(), k)
            .into_iter()
            .map(|i| points[i].clone())
            .collect();
        let mut assign = vec![0usize; points.len()];
        for _ in 0..KMEANS_ITERS {
            for (a, p) in assign.iter_mut().zip(&points) {
                *a = nearest_f64(&centers, p);
            }
            let mut sums = vec![vec![0.0; c]; k];
            let mut counts = vec![0usize; k];
            for (&a, p) in assign.iter().zip(&points) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                } else {
                    centers[j] = points[self.rng.random_range(0..points.len())].clone();
                }
            }
        }
        for (j, center) in centers.iter().enumerate() {
            for ch in 0..c {
                self.ae.codebook.data_mut()[j * c + ch] = T::lit(center[ch]);
                self.ema_sums[j * c + ch] = center[ch];
            }
            self.ema_counts[j] = 1.0;
        }
        self.codebook_ready = true;
        Ok(())
    }

    fn train_step(&mut self, x: &Tensor<T>, ids: &[String]) -> Result<AeStepLosses> {
        let cfg = self.ae.config.clone();
        let step = self.step + 1;
        let mut g = Graph::new();
        let p = g.bind(&self.ae.params);
        let xv = g.constant(x.clone());
        let z = self.ae.encode_graph(&mut g, &p, xv)?;
        let z_val = g.value(z).clone();
        let quantized = self.codebook_ready;
        let (dec_in, commit, assignment) = if quantized {
            let (zq, idx) = self.ae.quantize(&z_val)?;
            let st = g.straight_through(z, zq.clone())?;
            let target = g.constant(zq);
            let commit = g.mse(z, target)?;
            (st, Some(commit), Some(idx))
        } else {
            (z, None, None)
        };
        let recon = self.ae.decode_graph(&mut g, &p, dec_in)?;
        let rec_loss = g.l1(recon, xv)?;
        let total = match commit {
            Some(cm) => {
                let scaled = g.scale(cm, cfg.commitment);
                g.add(rec_loss, scaled)?
            }
            None => rec_loss,
        };
        let rec_v = g.value(rec_loss).data()[0].as_f64();
        let commit_v = commit.map_or(0.0, |c| g.value(c).data()[0].as_f64());
        ensure_finite(step, &[("reconstruction", rec_v), ("commitment", commit_v)], ids, x)?;
        let mut grads = g.backward(total)?;
        let grads = p.grads(&mut grads, &self.ae.params);
        drop(g);
        self.opt.step(&mut self.ae.params, &grads)?;
        if let Some(idx) = assignment {
            self.update_codebook(&z_val, &idx);
        }
        self.step = step;
        Ok(AeStepLosses {
            step,
            reconstruction: rec_v,
            commitment: commit_v,
            quantized,
        })
    }

    /// Exponential moving averages of assignment counts and sums; codes that
    /// fall idle are restarted at random encoder outputs from the batch.
    fn update_codebook(&mut self, z: &Tensor<T>, idx: &[usize]) {
        let c = self.ae.config.latent_channels;
        let k = self.ae.config.codebook_size;
        let decay = self.ae.config.ema_decay;
        let vectors = latent_vectors(z);
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * c];
        for (&j, v) in idx.iter().zip(&vectors) {
            counts[j] += 1.0;
            for ch in 0..c {
                sums[j * c + ch] += v[ch];
            }
        }
        for j in 0..k {
            self.ema_counts[j] = decay * self.ema_counts[j] + (1.0 - decay) * counts[j];
            for ch in 0..c {
                self.ema_sums[j * c + ch] = decay * self.ema_sums[j * c + ch] + (1.0 - decay) * sums[j * c + ch];
            }
        }
        let total: f64 = self.ema_counts.iter().sum();
        for j in 0..k {
            if self.ema_counts[j] < DEAD_CODE_COUNT {
                let v = &vectors[self.rng.random_range(0..vectors.len())];
                for ch in 0..c {
                    self.ema_sums[j * c + ch] = v[ch];
                }
                self.ema_counts[j] = 1.0;
                continue;
            }
            // Laplace smoothing keeps rarely used codes from exploding.
            let smoothed = (self.ema_counts[j] + 1e-5) / (total + k as f64 * 1e-5) * total;
            for ch in 0..c {
                self.ae.codebook.data_mut()[j * c + ch] = T::lit(self.ema_sums[j * c + ch] / smoothed);
            }
        }
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        let meta = serde_json::json!({
            "config": to_json(&self.ae.config)?,
            "step": self.step,
            "rng": checkpoint::rng_meta(&self.rng)?,
            "codebook_ready": self.codebook_ready,
            "ema_counts": to_json(&self.ema_counts)?,
            "ema_sums": to_json(&self.ema_sums)?,
            "history": to_json(&self.history)?,
        });
        let mut c = self.ae.weights_container(meta);
        checkpoint::save_adam(&mut c, &self.opt, &self.ae.params, "opt/");
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let ae = VqAutoencoder::from_container(c)?;
        let step: u64 = meta(c, "step")?;
        Ok(Self {
            opt: checkpoint::load_adam(c, &ae.params, AdamConfig::with_lr(ae.config.learning_rate), step, "opt/")?,
            ae,
            step,
            rng: checkpoint::rng_from_meta(c, "rng")?,
            codebook_ready: meta(c, "codebook_ready")?,
            ema_counts: meta(c, "ema_counts")?,
            ema_sums: meta(c, "ema_sums")?,
            history: meta(c, "history")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, AE_KIND)?)
    }
}

/// Trains a fresh autoencoder for `config.steps` steps.
pub fn train_autoencoder<T: Scalar>(images: &[RgbImage], config: AutoencoderConfig, seed: u64) -> Result<AeTrainer<T>> {
    let steps = config.steps;
    let mut t = AeTrainer::new(config, seed)?;
    t.train(images, steps)?;
    Ok(t)
}

fn latent_vectors<T: Scalar>(z: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, c, h, w) = z.dims4().expect("rank-4 latent");
    let plane = h * w;
    let d = z.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            out.push((0..c).map(|ch| d[(b * c + ch) * plane + i].as_f64()).collect());
        }
    }
    out
}

fn nearest_f64(centers: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, e) in centers.iter().enumerate() {
        let d: f64 = e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}
