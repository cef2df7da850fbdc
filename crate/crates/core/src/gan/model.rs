//! Generator, style encoder and multi-scale discriminator.

use histosynth_tensor::nn::{Conv2d, Init, Linear};
use histosynth_tensor::{seeded, Bound, Graph, ParamStore, Scalar, SeededRng, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::spade::SpadeHead;
use crate::subtype::NUM_CLASSES;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossWeights {
    pub adversarial: f64,
    pub feature_matching: f64,
    pub kl: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            feature_matching: 10.0,
            kl: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub image_size: usize,
    /// Channels at full resolution; doubled per halving up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub style_dim: usize,
    pub spade_hidden: usize,
    /// Kernel of every SPADE head conv (1 makes the head pointwise).
    pub spade_kernel: usize,
    pub learning_rate: f64,
    /// Discriminator learning rate; the generator rate when absent.
    #[serde(default)]
    pub d_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub weights: GanLossWeights,
    pub discriminator_scales: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            max_channels: 128,
            style_dim: 32,
            spade_hidden: 16,
            spade_kernel: 3,
            learning_rate: 1e-5,
            d_learning_rate: None,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            steps: 1000,
            weights: GanLossWeights::default(),
            discriminator_scales: 2,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_multiple_of(16) || !(s / 16).is_power_of_two() {
            return Err(Error::Config(format!("image_size {s} must be a power-of-two multiple of 16")));
        }
        let w = self.weights;
        if [w.adversarial, w.feature_matching, w.kl].iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.base_channels == 0 || self.style_dim == 0 || self.spade_hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("channel counts, style_dim and batch_size must be positive".into()));
        }
        if self.spade_kernel.is_multiple_of(2) {
            return Err(Error::Config("spade_kernel must be odd".into()));
        }
        if self.discriminator_scales == 0 || s >> (self.discriminator_scales - 1) < 16 {
            return Err(Error::Config("too many discriminator scales for the image size".into()));
        }
        Ok(())
    }

    /// Upsampling stages from the 4x4 seed to `image_size`.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    /// Channel width at `level` halvings below full resolution.
    fn channels_at(&self, level: usize) -> usize {
        (self.base_channels << level.min(16)).min(self.max_channels.max(self.base_channels))
    }
}

/// Residual block whose normalizations are SPADE heads. A learned 1x1
/// shortcut reads the first modulated activations when widths change.
#[derive(Debug, Clone)]
struct SpadeResBlock {
    norm0: SpadeHead,
    conv0: Conv2d,
    norm1: SpadeHead,
    conv1: Conv2d,
    shortcut: Option<Conv2d>,
}

impl SpadeResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &GanConfig, rng: &mut SeededRng) -> Self {
        let mid = cin.min(cout);
        let (h, k) = (cfg.spade_hidden, cfg.spade_kernel);
        Self {
            norm0: SpadeHead::new(store, &format!("{name}.norm0"), NUM_CLASSES, h, cin, k, rng),
            conv0: Conv2d::new(store, &format!("{name}.conv0"), cin, mid, 3, rng),
            norm1: SpadeHead::new(store, &format!("{name}.norm1"), NUM_CLASSES, h, mid, k, rng),
            conv1: Conv2d::with(store, &format!("{name}.conv1"), mid, cout, 3, 1, 1, Init::He(0.5), rng),
            shortcut: (cin != cout).then(|| Conv2d::with(store, &format!("{name}.shortcut"), cin, cout, 1, 1, 0, Init::He(1.0), rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Var) -> Result<Var> {
        let n0 = self.norm0.forward(g, p, x, mask)?;
        let a0 = g.leaky_relu(n0, LEAK);
        let h = self.conv0.forward(g, p, a0)?;
        let n1 = self.norm1.forward(g, p, h, mask)?;
        let a1 = g.leaky_relu(n1, LEAK);
        let h = self.conv1.forward(g, p, a1)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(g, p, n0)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    seed_fc: Linear,
    seed_channels: usize,
    blocks: Vec<SpadeResBlock>,
    to_rgb: Conv2d,
}

impl Generator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &GanConfig, rng: &mut SeededRng) -> Self {
        let stages = cfg.stages();
        let seed_channels = cfg.channels_at(stages);
        let seed_fc = Linear::new(store, "fc", cfg.style_dim, seed_channels * 16, Init::He(1.0), rng);
        let blocks = (0..stages)
            .map(|i| {
                let (cin, cout) = (cfg.channels_at(stages - i), cfg.channels_at(stages - i - 1));
                SpadeResBlock::new(store, &format!("block{i}"), cin, cout, cfg, rng)
            })
            .collect();
        let to_rgb = Conv2d::new(store, "to_rgb", cfg.base_channels, 3, 3, rng);
        Self {
            seed_fc,
            seed_channels,
            blocks,
            to_rgb,
        }
    }

    /// `style [N, style_dim]`, `mask` one-hot `[N, 6, S, S]` -> image in `[-1, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, style: Var, mask: Var) -> Result<Var> {
        let n = g.value(style).shape()[0];
        let pyramid = mask_pyramid(g, mask, self.blocks.len())?;
        let h = self.seed_fc.forward(g, p, style)?;
        let mut x = g.reshape(h, &[n, self.seed_channels, 4, 4])?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = g.upsample2(x)?;
            x = block.forward(g, p, x, pyramid[i + 1])?;
        }
        let a = g.leaky_relu(x, LEAK);
        let rgb = self.to_rgb.forward(g, p, a)?;
        Ok(g.tanh(rgb))
    }
}

/// One-hot masks averaged down to every generator resolution, coarsest first.
fn mask_pyramid<T: Scalar>(g: &mut Graph<T>, mask: Var, stages: usize) -> Result<Vec<Var>> {
    let mut levels = vec![mask];
    for _ in 0..stages {
        let prev = *levels.last().expect("non-empty");
        levels.push(g.avg_pool2(prev)?);
    }
    levels.reverse();
    Ok(levels)
}

/// Convolutional VAE encoder producing the style posterior `(mu, logvar)`.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    convs: Vec<Conv2d>,
    flat: usize,
    mu: Linear,
    logvar: Linear,
}

impl StyleEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &GanConfig, rng: &mut SeededRng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..cfg.stages() {
            let cout = cfg.channels_at(i + 1).min(64);
            convs.push(Conv2d::with(store, &format!("enc{i}"), cin, cout, 3, 2, 1, Init::He(1.0), rng));
            cin = cout;
        }
        let flat = cin * 16;
        Self {
            convs,
            flat,
            mu: Linear::new(store, "mu", flat, cfg.style_dim, Init::He(0.5), rng),
            logvar: Linear::new(store, "logvar", flat, cfg.style_dim, Init::He(0.1), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let n = g.value(image).shape()[0];
        let mut x = image;
        for conv in &self.convs {
            let h = conv.forward(g, p, x)?;
            x = g.leaky_relu(h, LEAK);
        }
        let flat = g.reshape(x, &[n, self.flat])?;
        Ok((self.mu.forward(g, p, flat)?, self.logvar.forward(g, p, flat)?))
    }
}

/// PatchGAN applied to the image/mask pair at several scales.
#[derive(Debug, Clone)]
pub struct Discriminator {
    scales: Vec<Vec<Conv2d>>,
}

/// Intermediate activations and final patch logits of one scale.
pub struct ScaleOutput {
    pub features: Vec<Var>,
    pub logits: Var,
}

impl Discriminator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &GanConfig, rng: &mut SeededRng) -> Self {
        let base = cfg.base_channels;
        let scales = (0..cfg.discriminator_scales)
            .map(|s| {
                let widths = [3 + NUM_CLASSES, base, base * 2, base * 4];
                let mut layers = Vec::new();
                for (i, pair) in widths.windows(2).enumerate() {
                    let (k, stride, pad) = if i < 2 { (4, 2, 1) } else { (3, 1, 1) };
                    layers.push(Conv2d::with(store, &format!("d{s}.conv{i}"), pair[0], pair[1], k, stride, pad, Init::He(1.0), rng));
                }
                layers.push(Conv2d::with(store, &format!("d{s}.out"), base * 4, 1, 3, 1, 1, Init::He(1.0), rng));
                layers
            })
            .collect();
        Self { scales }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: Var) -> Result<Vec<ScaleOutput>> {
        let mut input = g.concat(&[image, mask])?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, layers) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input)?;
            }
            let mut x = input;
            let mut features = Vec::new();
            let (last, hidden) = layers.split_last().expect("non-empty scale");
            for conv in hidden {
                let h = conv.forward(g, p, x)?;
                x = g.leaky_relu(h, LEAK);
                features.push(x);
            }
            let logits = last.forward(g, p, x)?;
            out.push(ScaleOutput { features, logits });
        }
        Ok(out)
    }
}

/// The three networks with their parameter stores.
#[derive(Debug, Clone)]
pub struct SpadeGan<T> {
    pub config: GanConfig,
    pub generator: Generator,
    pub encoder: StyleEncoder,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore<T>,
    pub enc_params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
}

impl<T: Scalar> SpadeGan<T> {
    /// Freshly initialized networks; weights depend only on `config` and `seed`.
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut gen_params = ParamStore::new();
        let mut enc_params = ParamStore::new();
        let mut disc_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, &config, &mut rng);
        let encoder = StyleEncoder::new(&mut enc_params, &config, &mut rng);
        let discriminator = Discriminator::new(&mut disc_params, &config, &mut rng);
        Ok(Self {
            config,
            generator,
            encoder,
            discriminator,
            gen_params,
            enc_params,
            disc_params,
        })
    }
}
