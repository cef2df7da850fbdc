//! Residual-encoder U-Net producing a tumor probability per pixel.

use std::path::PathBuf;

use histosynth_tensor::nn::{Conv2d, Init};
use histosynth_tensor::{seeded, Bound, Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::balance::{SamplingKind, DEFAULT_BACKGROUND_FRACTION};
use crate::error::{Error, Result};
use crate::layers::ResBlock;
use crate::segmentation::loss::LossWeights;

const GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Number of stride-2 stages in the encoder.
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Initialize encoder weights from `pretrained_encoder`.
    pub use_pretrained_encoder: bool,
    /// A segmenter checkpoint whose encoder has the same architecture.
    pub pretrained_encoder: Option<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Optimizer steps between evaluations; each evaluation closes an epoch.
    pub epoch_steps: u64,
    pub loss: LossWeights,
    pub threshold: f64,
    pub sampling: SamplingKind,
    pub background_fraction: f64,
    /// Random flips and quarter turns of each drawn patch.
    pub augment: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 3,
            base_channels: 8,
            max_channels: 64,
            use_pretrained_encoder: false,
            pretrained_encoder: None,
            learning_rate: 1e-6,
            batch_size: 16,
            steps: 2000,
            epoch_steps: 100,
            loss: LossWeights::default(),
            threshold: 0.5,
            sampling: SamplingKind::TumorSampled,
            background_fraction: DEFAULT_BACKGROUND_FRACTION,
            augment: true,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.base_channels == 0 || self.batch_size == 0 || self.epoch_steps == 0 {
            return Err(Error::Config("channels, batch size and epoch length must be positive".into()));
        }
        if self.use_pretrained_encoder && self.pretrained_encoder.is_none() {
            return Err(Error::Config("use_pretrained_encoder needs a pretrained_encoder checkpoint".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }

    /// Image sides must halve cleanly `encoder_depth` times.
    pub fn check_image_size(&self, w: usize, h: usize) -> Result<()> {
        let div = 1 << self.encoder_depth;
        if !w.is_multiple_of(div) || !h.is_multiple_of(div) {
            return Err(Error::Shape(format!("{w}x{h} image does not halve {} times", self.encoder_depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    stem: Conv2d,
    enc0: ResBlock,
    down: Vec<(Conv2d, ResBlock)>,
    up: Vec<ResBlock>,
    head: Conv2d,
}

pub(crate) const ENCODER_PREFIX: &str = "enc.";

impl UNet {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, config: &SegConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let c = |l| config.width(l);
        let g = Some(GROUPS);
        let stem = Conv2d::new(store, "enc.stem", 3, c(0), 3, &mut rng);
        let enc0 = ResBlock::new(store, "enc.block0", c(0), c(0), g, None, &mut rng);
        let down = (0..config.encoder_depth)
            .map(|l| {
                let conv = Conv2d::with(store, &format!("enc.down{l}"), c(l), c(l + 1), 3, 2, 1, Init::He(1.0), &mut rng);
                let block = ResBlock::new(store, &format!("enc.block{}", l + 1), c(l + 1), c(l + 1), g, None, &mut rng);
                (conv, block)
            })
            .collect();
        let up = (0..config.encoder_depth)
            .rev()
            .map(|l| ResBlock::new(store, &format!("dec.block{l}"), c(l + 1) + c(l), c(l), g, None, &mut rng))
            .collect();
        let head = Conv2d::with(store, "dec.head", c(0), 1, 1, 1, 0, Init::He(1.0), &mut rng);
        Self {
            stem,
            enc0,
            down,
            up,
            head,
        }
    }

    /// Tumor logits `[N, 1, H, W]`.
    pub(crate) fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, p, x)?;
        let mut h = self.enc0.forward(g, p, h, None)?;
        let mut skips = vec![h];
        for (conv, block) in &self.down {
            let a = g.silu(h);
            h = conv.forward(g, p, a)?;
            h = block.forward(g, p, h, None)?;
            skips.push(h);
        }
        skips.pop();
        for block in &self.up {
            let u = g.upsample2(h)?;
            let skip = skips.pop().expect("one skip per stage");
            let joined = g.concat(&[u, skip])?;
            h = block.forward(g, p, joined, None)?;
        }
        let a = g.silu(h);
        Ok(self.head.forward(g, p, a)?)
    }
}
