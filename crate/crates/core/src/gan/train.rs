//! Adversarial training, checkpoints and mask-conditioned generation.

use std::path::Path;

use histosynth_tensor::{seeded, Adam, AdamConfig, Container, Graph, Scalar, SeededRng, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_params, meta, params_with_prefix, to_json};
use crate::convert::{images_to_tensor, masks_to_one_hot, tensor_to_images};
use crate::data::grid::{RgbImage, SubtypeMask};
use crate::data::patch::LabeledPatch;
use crate::diagnostics::ensure_finite;
use crate::error::{Error, Result};
use crate::gan::model::{GanConfig, ScaleOutput, SpadeGan};

pub const GAN_KIND: &str = "spade-gan";
const RNG_SALT: u64 = 0x6761_6e5f_7472_6e67;

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanStepLosses {
    pub step: u64,
    pub discriminator: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub kl: f64,
    /// Weighted generator objective.
    pub generator: f64,
}

/// Networks, optimizers and the data-order stream of a GAN run.
#[derive(Debug, Clone)]
pub struct GanTrainer<T> {
    pub gan: SpadeGan<T>,
    opt_g: Adam<T>,
    opt_e: Adam<T>,
    opt_d: Adam<T>,
    step: u64,
    rng: SeededRng,
    pub history: Vec<GanStepLosses>,
}

fn adam_configs(cfg: &GanConfig) -> (AdamConfig, AdamConfig) {
    let mk = |lr| AdamConfig {
        learning_rate: lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    };
    (mk(cfg.learning_rate), mk(cfg.d_learning_rate.unwrap_or(cfg.learning_rate)))
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        let gan = SpadeGan::new(config, seed)?;
        let (g_cfg, d_cfg) = adam_configs(&gan.config);
        Ok(Self {
            opt_g: Adam::new(&gan.gen_params, g_cfg),
            opt_e: Adam::new(&gan.enc_params, g_cfg),
            opt_d: Adam::new(&gan.disc_params, d_cfg),
            gan,
            step: 0,
            rng: seeded(seed ^ RNG_SALT),
            history: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Runs `steps` alternating generator/discriminator updates on batches
    /// drawn uniformly with replacement from `patches`.
    pub fn train(&mut self, patches: &[LabeledPatch], steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        if patches.is_empty() {
            return Err(Error::Empty("GAN training needs patches".into()));
        }
        let s = self.gan.config.image_size;
        if let Some(bad) = patches.iter().find(|p| p.size() != (s, s)) {
            return Err(Error::Shape(format!(
                "patch {} is {:?}, GAN expects {s}x{s}",
                bad.id(),
                bad.size()
            )));
        }
        for _ in 0..steps {
            let batch: Vec<&LabeledPatch> = (0..self.gan.config.batch_size)
                .map(|_| &patches[self.rng.random_range(0..patches.len())])
                .collect();
            let losses = self.train_step(&batch)?;
            log::debug!("gan step {}: {:?}", losses.step, losses);
            self.history.push(losses);
        }
        Ok(())
    }

    fn train_step(&mut self, batch: &[&LabeledPatch]) -> Result<GanStepLosses> {
        let cfg = self.gan.config.clone();
        let w = cfg.weights;
        let images: Vec<&RgbImage> = batch.iter().map(|p| &p.image).collect();
        let masks: Vec<&SubtypeMask> = batch.iter().map(|p| &p.mask).collect();
        let real_t: Tensor<T> = images_to_tensor(&images)?;
        let mask_t: Tensor<T> = masks_to_one_hot(&masks)?;
        let eps_t = Tensor::randn(&[batch.len(), cfg.style_dim], T::one(), &mut self.rng);
        let ids: Vec<String> = batch.iter().map(|p| p.id()).collect();
        let step = self.step + 1;

        // Generator and style encoder update against a frozen discriminator.
        let mut g = Graph::new();
        let pg = g.bind(&self.gan.gen_params);
        let pe = g.bind(&self.gan.enc_params);
        let pd = g.bind_frozen(&self.gan.disc_params);
        let real = g.constant(real_t.clone());
        let mask = g.constant(mask_t.clone());
        let eps = g.constant(eps_t);
        let (mu, logvar) = self.gan.encoder.forward(&mut g, &pe, real)?;
        let z = reparameterize(&mut g, mu, logvar, eps)?;
        let fake = self.gan.generator.forward(&mut g, &pg, z, mask)?;
        let d_fake = self.gan.discriminator.forward(&mut g, &pd, fake, mask)?;
        let d_real = self.gan.discriminator.forward(&mut g, &pd, real, mask)?;
        let adv = generator_hinge(&mut g, &d_fake);
        let fm = feature_matching(&mut g, &d_fake, &d_real)?;
        let kl = kl_divergence(&mut g, mu, logvar, cfg.style_dim)?;
        let terms = [
            g.scale(adv, w.adversarial),
            g.scale(fm, w.feature_matching),
            g.scale(kl, w.kl),
        ];
        let partial = g.add(terms[0], terms[1])?;
        let total = g.add(partial, terms[2])?;
        let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].as_f64();
        let (adv_v, fm_v, kl_v, total_v) = (scalar(&g, adv), scalar(&g, fm), scalar(&g, kl), scalar(&g, total));
        ensure_finite(
            step,
            &[("adversarial", adv_v), ("feature_matching", fm_v), ("kl", kl_v)],
            &ids,
            &real_t,
        )?;
        let mut grads = g.backward(total)?;
        let gg = pg.grads(&mut grads, &self.gan.gen_params);
        let ge = pe.grads(&mut grads, &self.gan.enc_params);
        let fake_t = g.value(fake).clone();
        drop(g);
        self.opt_g.step(&mut self.gan.gen_params, &gg)?;
        self.opt_e.step(&mut self.gan.enc_params, &ge)?;

        // Discriminator update on the same real batch and the detached fakes.
        let mut g = Graph::new();
        let pd = g.bind(&self.gan.disc_params);
        let real = g.constant(real_t.clone());
        let fake = g.constant(fake_t);
        let mask = g.constant(mask_t);
        let d_real = self.gan.discriminator.forward(&mut g, &pd, real, mask)?;
        let d_fake = self.gan.discriminator.forward(&mut g, &pd, fake, mask)?;
        let d_loss = discriminator_hinge(&mut g, &d_real, &d_fake)?;
        let d_v = scalar(&g, d_loss);
        ensure_finite(step, &[("discriminator", d_v)], &ids, &real_t)?;
        let mut grads = g.backward(d_loss)?;
        let gd = pd.grads(&mut grads, &self.gan.disc_params);
        self.opt_d.step(&mut self.gan.disc_params, &gd)?;

        self.step = step;
        Ok(GanStepLosses {
            step,
            discriminator: d_v,
            adversarial: adv_v,
            feature_matching: fm_v,
            kl: kl_v,
            generator: total_v,
        })
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        let meta = serde_json::json!({
            "config": to_json(&self.gan.config)?,
            "step": self.step,
            "rng": checkpoint::rng_meta(&self.rng)?,
            "history": to_json(&self.history)?,
        });
        let mut c = self.gan.weights_container(meta);
        checkpoint::save_adam(&mut c, &self.opt_g, &self.gan.gen_params, "opt_g/");
        checkpoint::save_adam(&mut c, &self.opt_e, &self.gan.enc_params, "opt_e/");
        checkpoint::save_adam(&mut c, &self.opt_d, &self.gan.disc_params, "opt_d/");
        Ok(c)
    }

    /// Restores a run exactly, including optimizer moments and data order.
    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let gan = SpadeGan::from_container(c)?;
        let step: u64 = meta(c, "step")?;
        let (g_cfg, d_cfg) = adam_configs(&gan.config);
        Ok(Self {
            opt_g: checkpoint::load_adam(c, &gan.gen_params, g_cfg, step, "opt_g/")?,
            opt_e: checkpoint::load_adam(c, &gan.enc_params, g_cfg, step, "opt_e/")?,
            opt_d: checkpoint::load_adam(c, &gan.disc_params, d_cfg, step, "opt_d/")?,
            gan,
            step,
            rng: checkpoint::rng_from_meta(c, "rng")?,
            history: meta(c, "history")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, GAN_KIND)?)
    }
}

impl<T: Scalar> SpadeGan<T> {
    fn weights_container(&self, meta: serde_json::Value) -> Container<T> {
        let mut c = Container::new(GAN_KIND, meta);
        c.extend(params_with_prefix(&self.gen_params, "gen/"));
        c.extend(params_with_prefix(&self.enc_params, "enc/"));
        c.extend(params_with_prefix(&self.disc_params, "disc/"));
        c
    }

    /// Network weights from a GAN checkpoint (optimizer state is ignored).
    pub fn from_container(c: &Container<T>) -> Result<Self> {
        checkpoint::expect_kind(c, GAN_KIND)?;
        let config: GanConfig = meta(c, "config")?;
        let mut gan = SpadeGan::new(config, 0)?;
        load_params(&mut gan.gen_params, c, "gen/")?;
        load_params(&mut gan.enc_params, c, "enc/")?;
        load_params(&mut gan.disc_params, c, "disc/")?;
        Ok(gan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, GAN_KIND)?)
    }
}

/// Trains a fresh GAN for `config.steps` steps.
pub fn train_gan<T: Scalar>(patches: &[LabeledPatch], config: GanConfig, seed: u64) -> Result<GanTrainer<T>> {
    let steps = config.steps;
    let mut trainer = GanTrainer::new(config, seed)?;
    trainer.train(patches, steps)?;
    Ok(trainer)
}

/// `z = mu + exp(logvar / 2) * eps`.
fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    Ok(g.add(mu, noise)?)
}

/// KL of the diagonal Gaussian posterior from the unit prior, summed over
/// style dimensions and averaged over the batch.
fn kl_divergence<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, dim: usize) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let m = g.mean(c);
    Ok(g.scale(m, 0.5 * dim as f64))
}

fn generator_hinge<T: Scalar>(g: &mut Graph<T>, fake: &[ScaleOutput]) -> Var {
    let means: Vec<Var> = fake.iter().map(|s| g.mean(s.logits)).collect();
    let total = sum_vars(g, &means);
    g.scale(total, -1.0 / fake.len() as f64)
}

fn discriminator_hinge<T: Scalar>(g: &mut Graph<T>, real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Var> {
    let mut parts = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        let neg = g.scale(r.logits, -1.0);
        let r_margin = g.add_scalar(neg, 1.0);
        let r_hinge = g.relu(r_margin);
        parts.push(g.mean(r_hinge));
        let f_margin = g.add_scalar(f.logits, 1.0);
        let f_hinge = g.relu(f_margin);
        parts.push(g.mean(f_hinge));
    }
    let total = sum_vars(g, &parts);
    Ok(g.scale(total, 1.0 / real.len() as f64))
}

/// L1 distance between discriminator features of fake and real pairs.
fn feature_matching<T: Scalar>(g: &mut Graph<T>, fake: &[ScaleOutput], real: &[ScaleOutput]) -> Result<Var> {
    let mut parts = Vec::new();
    for (f, r) in fake.iter().zip(real) {
        for (&ff, &rf) in f.features.iter().zip(&r.features) {
            let target = g.detach(rf);
            parts.push(g.l1(ff, target)?);
        }
    }
    let total = sum_vars(g, &parts);
    Ok(g.scale(total, 1.0 / fake.len() as f64))
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v).expect("scalar losses share a shape");
    }
    acc
}

/// Style input for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    /// A standard-normal draw, as used at generation time.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = seeded(seed);
        Self(Tensor::<f64>::randn(&[dim], 1.0, &mut rng).into_data())
    }
}

/// Renders one image for `mask` and `style`; a pure function of its inputs.
pub fn gan_generate<T: Scalar>(gan: &SpadeGan<T>, mask: &SubtypeMask, style: &StyleVector) -> Result<RgbImage> {
    let s = gan.config.image_size;
    if mask.dims() != (s, s) {
        return Err(Error::Shape(format!(
            "mask is {:?}, checkpoint generates {s}x{s}",
            mask.dims()
        )));
    }
    if style.0.len() != gan.config.style_dim || style.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "style vector must hold {} finite values",
            gan.config.style_dim
        )));
    }
    let mut g = Graph::new();
    let p = g.bind_frozen(&gan.gen_params);
    let z = g.constant(Tensor::new(&[1, style.0.len()], style.0.iter().map(|&v| T::lit(v)).collect())?);
    let m = g.constant(masks_to_one_hot::<T>(&[mask])?);
    let img = gan.generator.forward(&mut g, &p, z, m)?;
    Ok(tensor_to_images(g.value(img))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::generate_phantom_slide;

    fn tiny() -> GanConfig {
        GanConfig {
            image_size: 16,
            base_channels: 4,
            max_channels: 8,
            style_dim: 4,
            spade_hidden: 4,
            batch_size: 2,
            learning_rate: 1e-3,
            discriminator_scales: 1,
            ..GanConfig::default()
        }
    }

    fn tiny_with_steps(steps: u64) -> GanConfig {
        GanConfig { steps, ..tiny() }
    }

    fn patches() -> Vec<LabeledPatch> {
        let s = generate_phantom_slide(2, 64, 6).unwrap().into_slide();
        crate::data::patch::extract_patches(&s, 16, 16).unwrap()
    }

    #[test]
    fn zero_steps_reproduce_initialization() {
        let a = GanTrainer::<f32>::new(tiny_with_steps(0), 9).unwrap().to_container().unwrap();
        let b = train_gan::<f32>(&patches(), tiny_with_steps(0), 9).unwrap().to_container().unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn resume_then_zero_steps_is_bit_identical() {
        let mut t = GanTrainer::<f32>::new(tiny(), 1).unwrap();
        t.train(&patches(), 3).unwrap();
        let bytes = t.to_container().unwrap().to_bytes().unwrap();
        let mut resumed = GanTrainer::<f32>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        resumed.train(&patches(), 0).unwrap();
        assert_eq!(resumed.to_container().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = patches();
        let mut straight = GanTrainer::<f32>::new(tiny(), 4).unwrap();
        straight.train(&data, 4).unwrap();
        let mut first = GanTrainer::<f32>::new(tiny(), 4).unwrap();
        first.train(&data, 2).unwrap();
        let mut second = GanTrainer::<f32>::from_container(&first.to_container().unwrap()).unwrap();
        second.train(&data, 2).unwrap();
        assert_eq!(
            straight.to_container().unwrap().to_bytes().unwrap(),
            second.to_container().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn generation_is_deterministic_and_style_sensitive() {
        let gan = SpadeGan::<f32>::new(tiny(), 5).unwrap();
        let mask = patches()[5].mask.clone();
        let a = StyleVector::from_seed(1, 4);
        let b = StyleVector::from_seed(2, 4);
        let ia = gan_generate(&gan, &mask, &a).unwrap();
        assert_eq!(ia, gan_generate(&gan, &mask, &a).unwrap());
        let ib = gan_generate(&gan, &mask, &b).unwrap();
        let diff: u64 = ia
            .pixels()
            .iter()
            .zip(ib.pixels())
            .flat_map(|(p, q)| (0..3).map(move |c| p[c].abs_diff(q[c]) as u64))
            .sum();
        assert!(diff > 0);
    }

    #[test]
    fn wrong_mask_size_is_rejected() {
        let gan = SpadeGan::<f32>::new(tiny(), 5).unwrap();
        let mask = SubtypeMask::filled(32, 32, 0);
        assert!(matches!(
            gan_generate(&gan, &mask, &StyleVector::from_seed(0, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kl_of_unit_posterior_is_zero() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[2, 3]));
        let lv = g.constant(Tensor::zeros(&[2, 3]));
        let kl = kl_divergence(&mut g, mu, lv, 3).unwrap();
        assert_eq!(g.value(kl).data()[0], 0.0);
        // mu = 1 in every dimension: 0.5 * 3 per sample
        let mu = g.constant(Tensor::full(&[2, 3], 1.0));
        let kl = kl_divergence(&mut g, mu, lv, 3).unwrap();
        assert!((g.value(kl).data()[0] - 1.5).abs() < 1e-12);
    }
}
