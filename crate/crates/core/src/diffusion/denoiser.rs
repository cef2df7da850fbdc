//! Mask-conditioned noise predictor for latent diffusion.

use histosynth_tensor::nn::{Conv2d, Init, Linear};
use histosynth_tensor::{Bound, Graph, ParamStore, Scalar, SeededRng, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{timestep_embedding, ResBlock};
use crate::subtype::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channels at full latent resolution.
    pub base_channels: usize,
    /// Width multiplier per resolution level; its length is the depth.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }

    /// Latent side must halve cleanly at each level below the first.
    pub fn check_latent_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.channel_mults.len() - 1);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "latent {w}x{h} does not halve {} times",
                self.channel_mults.len() - 1
            )));
        }
        Ok(())
    }
}

/// U-Net over `concat(x_t, one_hot(mask))` that predicts the added noise.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    latent_channels: usize,
    time_in: Linear,
    time_out: Linear,
    stem: Conv2d,
    down: Vec<(ResBlock, Option<Conv2d>)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out: Conv2d,
}

impl Denoiser {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &DenoiserConfig,
        latent_channels: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let td = config.time_dim;
        let temb = 2 * td;
        let widths: Vec<usize> = config.channel_mults.iter().map(|m| m * config.base_channels).collect();
        let levels = widths.len();
        let groups = Some(config.groups);
        let time_in = Linear::new(store, "den.time_in", td, temb, Init::He(1.0), rng);
        let time_out = Linear::new(store, "den.time_out", temb, temb, Init::He(1.0), rng);
        let stem = Conv2d::new(store, "den.stem", latent_channels + NUM_CLASSES, widths[0], 3, rng);
        let mut down = Vec::with_capacity(levels);
        for (l, &w) in widths.iter().enumerate() {
            let cin = if l == 0 { widths[0] } else { widths[l - 1] };
            let block = ResBlock::new(store, &format!("den.down{l}"), cin, w, groups, Some(temb), rng);
            let pool = (l + 1 < levels).then(|| Conv2d::with(store, &format!("den.pool{l}"), w, w, 3, 2, 1, Init::He(1.0), rng));
            down.push((block, pool));
        }
        let deepest = widths[levels - 1];
        let mid = ResBlock::new(store, "den.mid", deepest, deepest, groups, Some(temb), rng);
        let mut up = Vec::with_capacity(levels);
        let mut cur = deepest;
        for l in (0..levels).rev() {
            up.push(ResBlock::new(store, &format!("den.up{l}"), cur + widths[l], widths[l], groups, Some(temb), rng));
            cur = widths[l];
        }
        let out = Conv2d::with(store, "den.out", widths[0], latent_channels, 3, 1, 1, Init::Zeros, rng);
        Ok(Self {
            config: config.clone(),
            latent_channels,
            time_in,
            time_out,
            stem,
            down,
            mid,
            up,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// `x_t` is `[N, C, h, w]`, `cond` the `[N, 6, h, w]` one-hot mask.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x_t: Var, cond: Var, timesteps: &[usize]) -> Result<Var> {
        let (n, c, h, w) = g.value(x_t).dims4()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!("denoiser expects {} latent channels, got {c}", self.latent_channels)));
        }
        if timesteps.len() != n {
            return Err(Error::Shape(format!("{} timesteps for a batch of {n}", timesteps.len())));
        }
        self.config.check_latent_size(h, w)?;
        let emb = g.constant(timestep_embedding(timesteps, self.config.time_dim));
        let t = self.time_in.forward(g, p, emb)?;
        let t = g.silu(t);
        let t = self.time_out.forward(g, p, t)?;

        let input = g.concat(&[x_t, cond])?;
        let mut h = self.stem.forward(g, p, input)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, pool) in &self.down {
            h = block.forward(g, p, h, Some(t))?;
            skips.push(h);
            if let Some(pool) = pool {
                h = pool.forward(g, p, h)?;
            }
        }
        h = self.mid.forward(g, p, h, Some(t))?;
        for (i, block) in self.up.iter().enumerate() {
            if i > 0 {
                h = g.upsample2(h)?;
            }
            let skip = skips.pop().expect("one skip per level");
            let joined = g.concat(&[h, skip])?;
            h = block.forward(g, p, joined, Some(t))?;
        }
        let h = g.silu(h);
        Ok(self.out.forward(g, p, h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use histosynth_tensor::{seeded, Tensor};

    fn build(config: &DenoiserConfig) -> (ParamStore<f32>, Denoiser) {
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, config, 3, &mut seeded(0)).unwrap();
        (store, d)
    }

    fn run(store: &ParamStore<f32>, d: &Denoiser, x: Tensor<f32>, c: Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = g.bind_frozen(store);
        let (xv, cv) = (g.constant(x), g.constant(c));
        let y = d.forward(&mut g, &p, xv, cv, t)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn fresh_denoiser_predicts_zero_noise() {
        let cfg = DenoiserConfig { base_channels: 8, ..DenoiserConfig::default() };
        let (store, d) = build(&cfg);
        let mut rng = seeded(1);
        let y = run(&store, &d, Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng), Tensor::zeros(&[2, 6, 8, 8]), &[1, 50]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batching_does_not_change_outputs() {
        let cfg = DenoiserConfig { base_channels: 8, ..DenoiserConfig::default() };
        let (mut store, d) = build(&cfg);
        let mut rng = seeded(2);
        for (_, t) in store.iter_mut() {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 6, 8, 8], 1.0, &mut rng);
        let all = run(&store, &d, x.clone(), c.clone(), &[3, 7, 11]).unwrap();
        for i in 0..3 {
            let one = run(&store, &d, x.batch_item(i).unwrap(), c.batch_item(i).unwrap(), &[[3, 7, 11][i]]).unwrap();
            assert_eq!(one, all.batch_item(i).unwrap());
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = DenoiserConfig { base_channels: 8, ..DenoiserConfig::default() };
        let (store, d) = build(&cfg);
        assert!(run(&store, &d, Tensor::zeros(&[1, 4, 8, 8]), Tensor::zeros(&[1, 6, 8, 8]), &[1]).is_err());
        assert!(run(&store, &d, Tensor::zeros(&[1, 3, 6, 6]), Tensor::zeros(&[1, 6, 6, 6]), &[1]).is_err());
        assert!(run(&store, &d, Tensor::zeros(&[2, 3, 8, 8]), Tensor::zeros(&[2, 6, 8, 8]), &[1]).is_err());
    }
}
