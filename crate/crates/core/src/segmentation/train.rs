//! Segmenter training, model selection and prediction.

use std::path::Path;

use histosynth_tensor::{seeded, Adam, AdamConfig, Container, Graph, ParamStore, Scalar, SeededRng, Tensor};
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{build_training_sampler, SamplingStrategy, TrainingSampler};
use crate::checkpoint::{self, load_params, meta, params_with_prefix, to_json};
use crate::convert::{binary_to_tensor, images_to_tensor};
use crate::data::grid::{Grid, RgbImage};
use crate::data::patch::LabeledPatch;
use crate::diagnostics::ensure_finite;
use crate::error::{Error, Result};
use crate::segmentation::loss::{dice_ce_loss, dice_ce_loss_with_grad};
use crate::segmentation::model::{SegConfig, UNet, ENCODER_PREFIX};

pub const SEG_KIND: &str = "segmenter";
const SAMPLER_SALT: u64 = 0x7365_675f_7361_6d70;
const AUGMENT_SALT: u64 = 0x7365_675f_6175_676d;
const EVAL_CHUNK: usize = 8;

/// Per-pixel tumor probabilities and their thresholded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPrediction {
    pub probabilities: Grid<f64>,
    pub binary: Grid<u8>,
}

/// A trained network together with the image size it accepts.
#[derive(Debug, Clone)]
pub struct Segmenter<T> {
    pub config: SegConfig,
    /// `(width, height)`.
    pub image_size: (usize, usize),
    pub params: ParamStore<T>,
    net: UNet,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegConfig, image_size: (usize, usize), seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_image_size(image_size.0, image_size.1)?;
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, &config, seed);
        let mut model = Self {
            config,
            image_size,
            params,
            net,
        };
        if model.config.use_pretrained_encoder {
            model.load_encoder()?;
        }
        Ok(model)
    }

    fn load_encoder(&mut self) -> Result<()> {
        let path = self.config.pretrained_encoder.clone().expect("validated");
        let c: Container<T> = checkpoint::load_container(&path, SEG_KIND)?;
        for (name, tensor) in self.params.iter_mut() {
            if !name.starts_with(ENCODER_PREFIX) {
                continue;
            }
            let source = c
                .get(&format!("seg/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("pretrained encoder lacks {name}")))?;
            source.expect_same_shape(tensor)?;
            *tensor = source.clone();
        }
        Ok(())
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        if image.dims() != self.image_size {
            return Err(Error::Shape(format!(
                "segmenter expects {}x{} images, got {}x{}",
                self.image_size.0,
                self.image_size.1,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Tumor probabilities `[N, 1, H, W]`.
    pub fn probabilities(&self, images: &[&RgbImage]) -> Result<Tensor<T>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let x = g.constant(images_to_tensor(images)?);
        let logits = self.net.logits(&mut g, &p, x)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).clone())
    }

    pub fn predict(&self, image: &RgbImage) -> Result<BinaryPrediction> {
        let probs = self.probabilities(&[image])?;
        let (w, h) = self.image_size;
        let probabilities = Grid::from_vec(w, h, probs.data().iter().map(|v| v.as_f64()).collect())?;
        let binary = probabilities.map(|p| u8::from(p > self.config.threshold));
        Ok(BinaryPrediction { probabilities, binary })
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container<T>> {
        let mut meta = serde_json::json!({
            "config": to_json(&self.config)?,
            "image_size": [self.image_size.0, self.image_size.1],
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut c = Container::new(SEG_KIND, meta);
        c.extend(params_with_prefix(&self.params, "seg/"));
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        checkpoint::expect_kind(c, SEG_KIND)?;
        let size: [usize; 2] = meta(c, "image_size")?;
        let mut config: SegConfig = meta(c, "config")?;
        // weights come from the checkpoint itself
        config.use_pretrained_encoder = false;
        let mut model = Self::new(config, (size[0], size[1]), 0)?;
        load_params(&mut model.params, c, "seg/")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container(serde_json::json!({}))?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::load_container(path, SEG_KIND)?)
    }
}

/// Thresholded prediction for one image.
pub fn predict_mask<T: Scalar>(model: &Segmenter<T>, image: &RgbImage) -> Result<BinaryPrediction> {
    model.predict(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean of the per-batch losses since the previous evaluation.
    pub batch_loss: f64,
    /// Loss over the whole training set with the current weights.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

/// Loss and pooled Dice of a model over a set of patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScore {
    pub loss: f64,
    pub dice: f64,
}

pub fn score_patches<T: Scalar>(model: &Segmenter<T>, patches: &[LabeledPatch]) -> Result<SetScore> {
    if patches.is_empty() {
        return Err(Error::Empty("no patches to score".into()));
    }
    let mut probs = Vec::with_capacity(patches.len().div_ceil(EVAL_CHUNK));
    let mut targets = Vec::with_capacity(probs.capacity());
    for chunk in patches.chunks(EVAL_CHUNK) {
        let images: Vec<&RgbImage> = chunk.iter().map(|p| &p.image).collect();
        probs.push(model.probabilities(&images)?);
        let t: Vec<Grid<u8>> = chunk.iter().map(|p| p.tumor_target()).collect();
        targets.push(binary_to_tensor::<T>(&t.iter().collect::<Vec<_>>())?);
    }
    let probs = Tensor::stack_batch(&probs)?;
    let targets = Tensor::stack_batch(&targets)?;
    let loss = dice_ce_loss(&probs, &targets, model.config.loss)?.total;
    let threshold = T::lit(model.config.threshold);
    let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        let (p, y) = (p > threshold, y > T::zero());
        inter += usize::from(p && y);
        pred += usize::from(p);
        truth += usize::from(y);
    }
    let dice = if pred + truth == 0 { 1.0 } else { 2.0 * inter as f64 / (pred + truth) as f64 };
    Ok(SetScore { loss, dice })
}

/// Applies one of the eight flips/quarter turns; turns are skipped for non-square grids.
pub(crate) fn dihedral<P: Copy>(grid: &Grid<P>, k: u8) -> Grid<P> {
    let (w, h) = grid.dims();
    let transpose = k & 4 != 0 && w == h;
    let (ow, oh) = if transpose { (h, w) } else { (w, h) };
    Grid::from_fn(ow, oh, |x, y| {
        let (mut sx, mut sy) = if transpose { (y, x) } else { (x, y) };
        if k & 1 != 0 {
            sx = w - 1 - sx;
        }
        if k & 2 != 0 {
            sy = h - 1 - sy;
        }
        grid.get(sx, sy)
    })
}

/// Segmenter run state with best-by-validation model selection.
#[derive(Debug, Clone)]
pub struct SegTrainer<T> {
    pub model: Segmenter<T>,
    opt: Adam<T>,
    sampler: TrainingSampler,
    augment_rng: SeededRng,
    step: u64,
    batch_losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
    best: Option<(usize, f64, ParamStore<T>)>,
}

impl<T: Scalar> SegTrainer<T> {
    pub fn new(config: SegConfig, train: &[LabeledPatch], seed: u64) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::Empty("segmenter training set is empty".into()))?;
        let size = first.image.dims();
        if let Some(p) = train.iter().find(|p| p.image.dims() != size) {
            return Err(Error::Shape(format!("patch {} differs in size from the first patch", p.id())));
        }
        let strategy = SamplingStrategy {
            kind: config.sampling,
            seed: seed ^ SAMPLER_SALT,
            background_fraction: config.background_fraction,
        };
        let sampler = build_training_sampler(train, &strategy)?;
        let model = Segmenter::new(config, size, seed)?;
        Ok(Self {
            opt: Adam::new(&model.params, AdamConfig::with_lr(model.config.learning_rate)),
            model,
            sampler,
            augment_rng: seeded(seed ^ AUGMENT_SALT),
            step: 0,
            batch_losses: Vec::new(),
            history: Vec::new(),
            best: None,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Runs `steps` optimizer steps, closing an epoch every `epoch_steps`.
    pub fn train(&mut self, train: &[LabeledPatch], val: &[LabeledPatch], steps: u64) -> Result<()> {
        let epoch = self.model.config.epoch_steps;
        for _ in 0..steps {
            let loss = self.train_step(train)?;
            self.batch_losses.push(loss);
            if self.step.is_multiple_of(epoch) {
                self.close_epoch(train, val)?;
            }
        }
        Ok(())
    }

    fn train_step(&mut self, train: &[LabeledPatch]) -> Result<f64> {
        let step = self.step + 1;
        let n = self.model.config.batch_size;
        let picks: Vec<usize> = (&mut self.sampler).take(n).collect();
        let mut images = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for &i in &picks {
            let p = &train[i];
            let k = if self.model.config.augment { self.augment_rng.random_range(0..8u8) } else { 0 };
            images.push(dihedral(&p.image, k));
            targets.push(dihedral(&p.tumor_target(), k));
        }
        let x = images_to_tensor::<T>(&images.iter().collect::<Vec<_>>())?;
        let y = binary_to_tensor::<T>(&targets.iter().collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let p = g.bind(&self.model.params);
        let xv = g.constant(x.clone());
        let logits = self.model.net.logits(&mut g, &p, xv)?;
        let probs = g.sigmoid(logits);
        let (terms, grad) = dice_ce_loss_with_grad(g.value(probs), &y, self.model.config.loss)?;
        let ids: Vec<String> = picks.iter().map(|&i| train[i].id()).collect();
        ensure_finite(step, &[("dice", terms.dice), ("cross_entropy", terms.ce)], &ids, &x)?;
        let loss = g.external_scalar(probs, T::lit(terms.total), grad)?;
        let mut grads = g.backward(loss)?;
        let grads = p.grads(&mut grads, &self.model.params);
        drop(g);
        self.opt.step(&mut self.model.params, &grads)?;
        self.step = step;
        Ok(terms.total)
    }

    /// Scores the current weights and records an epoch.
    pub fn close_epoch(&mut self, train: &[LabeledPatch], val: &[LabeledPatch]) -> Result<EpochRecord> {
        let train_score = score_patches(&self.model, train)?;
        let val_score = if val.is_empty() { train_score } else { score_patches(&self.model, val)? };
        let batch_loss = if self.batch_losses.is_empty() {
            train_score.loss
        } else {
            self.batch_losses.iter().sum::<f64>() / self.batch_losses.len() as f64
        };
        self.batch_losses.clear();
        let record = EpochRecord {
            epoch: self.history.len(),
            step: self.step,
            batch_loss,
            train_loss: train_score.loss,
            val_loss: val_score.loss,
            val_dice: val_score.dice,
        };
        info!(
            "epoch {} step {}: train loss {:.4}, val loss {:.4}, val dice {:.4}",
            record.epoch, record.step, record.train_loss, record.val_loss, record.val_dice
        );
        if self.best.as_ref().is_none_or(|(_, d, _)| record.val_dice > *d) {
            self.best = Some((record.epoch, record.val_dice, self.model.params.clone()));
        }
        self.history.push(record);
        Ok(record)
    }

    /// Epoch index and weights with the highest validation Dice so far.
    pub fn best(&self) -> Option<(usize, Segmenter<T>)> {
        self.best.as_ref().map(|(epoch, _, params)| {
            let mut model = self.model.clone();
            model.params = params.clone();
            (*epoch, model)
        })
    }
}

/// Outcome of a complete training run.
#[derive(Debug, Clone)]
pub struct SegRun<T> {
    /// Weights from the epoch with the best validation Dice.
    pub model: Segmenter<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> SegRun<T> {
    pub fn to_container(&self) -> Result<Container<T>> {
        self.model.to_container(serde_json::json!({
            "best_epoch": self.best_epoch,
            "history": to_json(&self.history)?,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::load_container(path, SEG_KIND)?;
        Ok(Self {
            model: Segmenter::from_container(&c)?,
            best_epoch: meta(&c, "best_epoch")?,
            history: meta(&c, "history")?,
        })
    }
}

/// Trains for `config.steps` steps and keeps the epoch with the best
/// validation Dice; an empty `val` falls back to the training set.
pub fn train_segmenter<T: Scalar>(train: &[LabeledPatch], val: &[LabeledPatch], config: SegConfig, seed: u64) -> Result<SegRun<T>> {
    if val.is_empty() {
        warn!("no validation patches; selecting the model on the training set");
    }
    let steps = config.steps;
    let mut trainer = SegTrainer::new(config, train, seed)?;
    trainer.train(train, val, steps)?;
    if trainer.history.last().is_none_or(|r| r.step != trainer.step) {
        trainer.close_epoch(train, val)?;
    }
    let (best_epoch, model) = trainer.best().expect("at least one epoch");
    Ok(SegRun {
        model,
        best_epoch,
        history: trainer.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::generate_phantom_slide;
    use crate::data::patch::extract_patches;
    use proptest::prelude::*;

    fn patches() -> Vec<LabeledPatch> {
        let slide = generate_phantom_slide(2, 64, 4).unwrap().into_slide();
        extract_patches(&slide, 32, 32).unwrap()
    }

    fn small(steps: u64, lr: f64) -> SegConfig {
        SegConfig {
            encoder_depth: 2,
            base_channels: 4,
            batch_size: 2,
            steps,
            epoch_steps: 2,
            learning_rate: lr,
            ..SegConfig::default()
        }
    }

    #[test]
    fn frozen_weights_give_constant_epoch_losses() {
        let ps = patches();
        let run = train_segmenter::<f64>(&ps[..3], &ps[3..], small(6, 0.0), 1).unwrap();
        assert_eq!(run.history.len(), 3);
        for r in &run.history[1..] {
            assert_eq!(r.train_loss, run.history[0].train_loss);
            assert_eq!(r.val_loss, run.history[0].val_loss);
        }
        assert_eq!(run.best_epoch, 0);
    }

    #[test]
    fn same_seed_gives_same_run() {
        let ps = patches();
        let a = train_segmenter::<f32>(&ps[..3], &ps[3..], small(6, 1e-3), 4).unwrap();
        let b = train_segmenter::<f32>(&ps[..3], &ps[3..], small(6, 1e-3), 4).unwrap();
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.history, b.history);
        let img = &ps[0].image;
        assert_eq!(a.model.predict(img).unwrap(), b.model.predict(img).unwrap());
    }

    #[test]
    fn prediction_shape_purity_and_size_check() {
        let ps = patches();
        let model = Segmenter::<f32>::new(small(0, 0.0), (32, 32), 0).unwrap();
        let pred = predict_mask(&model, &ps[0].image).unwrap();
        assert_eq!(pred.binary.dims(), (32, 32));
        assert!(pred.probabilities.pixels().iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        for (&p, &b) in pred.probabilities.pixels().iter().zip(pred.binary.pixels()) {
            assert_eq!(b == 1, p > 0.5);
        }
        assert_eq!(pred, predict_mask(&model, &ps[0].image).unwrap());
        assert!(predict_mask(&model, &RgbImage::filled(64, 64, [0, 0, 0])).is_err());
        assert!(Segmenter::<f32>::new(small(0, 0.0), (30, 32), 0).is_err());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(train_segmenter::<f32>(&[], &[], small(1, 0.0), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let ps = patches();
        let run = train_segmenter::<f32>(&ps[..3], &ps[3..], small(2, 1e-3), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        run.save(&path).unwrap();
        let back = SegRun::<f32>::load(&path).unwrap();
        assert_eq!(back.history, run.history);
        assert_eq!(back.model.predict(&ps[1].image).unwrap(), run.model.predict(&ps[1].image).unwrap());
    }

    #[test]
    fn pretrained_encoder_is_copied_and_decoder_is_not() {
        let ps = patches();
        let run = train_segmenter::<f32>(&ps[..3], &ps[3..], small(2, 1e-2), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        run.save(&path).unwrap();
        let config = SegConfig {
            use_pretrained_encoder: true,
            pretrained_encoder: Some(path),
            ..small(0, 0.0)
        };
        let fresh = Segmenter::<f32>::new(config, (32, 32), 99).unwrap();
        for ((name, a), (_, b)) in fresh.params.iter().zip(run.model.params.iter()) {
            assert_eq!(name.starts_with(ENCODER_PREFIX), a == b, "{name}");
        }
        assert!(SegConfig { use_pretrained_encoder: true, ..small(0, 0.0) }.validate().is_err());
    }

    proptest! {
        #[test]
        fn target_maps_every_subtype_to_tumor(codes in proptest::collection::vec(0u8..6, 16)) {
            let mask = Grid::from_vec(4, 4, codes.clone()).unwrap();
            let p = LabeledPatch {
                slide_id: "s".into(),
                origin: (0, 0),
                image: RgbImage::filled(4, 4, [0, 0, 0]),
                mask,
                instances: Grid::filled(4, 4, 0),
            };
            let t = p.tumor_target();
            for (c, v) in codes.iter().zip(t.pixels()) {
                prop_assert_eq!(*v, u8::from(*c > 0));
            }
        }

        #[test]
        fn dihedral_transforms_permute_positions(k in 0u8..8) {
            let g = Grid::from_fn(4, 4, |x, y| (y * 4 + x) as u8);
            let mut seen = dihedral(&g, k).pixels().to_vec();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..16).collect::<Vec<u8>>());
            prop_assert_eq!(dihedral(&g, k & !4) == g, k & 3 == 0);
        }
    }
}
