//! Building blocks shared by the autoencoder, denoiser and segmenter.

use histosynth_tensor::nn::{Conv2d, GroupNorm, Init, Linear};
use histosynth_tensor::{Bound, Graph, ParamStore, Scalar, SeededRng, Tensor, Var};

use crate::error::Result;

/// Pre-activation residual block: `skip(x) + conv1(act(norm1(conv0(act(norm0(x)))) + t))`,
/// where `t` is an optional per-channel projection of a time embedding.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm0: Option<GroupNorm>,
    conv0: Conv2d,
    time: Option<Linear>,
    norm1: Option<GroupNorm>,
    conv1: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: Option<usize>,
        time_dim: Option<usize>,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            norm0: groups.map(|g| GroupNorm::new(store, &format!("{name}.norm0"), cin, g)),
            conv0: Conv2d::new(store, &format!("{name}.conv0"), cin, cout, 3, rng),
            time: time_dim.map(|d| Linear::new(store, &format!("{name}.time"), d, cout, Init::He(0.5), rng)),
            norm1: groups.map(|g| GroupNorm::new(store, &format!("{name}.norm1"), cout, g)),
            conv1: Conv2d::with(store, &format!("{name}.conv1"), cout, cout, 3, 1, 1, Init::He(0.5), rng),
            skip: (cin != cout).then(|| Conv2d::with(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, Init::He(1.0), rng)),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, time: Option<Var>) -> Result<Var> {
        let h = match &self.norm0 {
            Some(n) => n.forward(g, p, x)?,
            None => x,
        };
        let h = g.silu(h);
        let mut h = self.conv0.forward(g, p, h)?;
        if let (Some(proj), Some(t)) = (&self.time, time) {
            let ta = g.silu(t);
            let tv = proj.forward(g, p, ta)?;
            h = g.add_per_channel(h, tv)?;
        }
        let h = match &self.norm1 {
            Some(n) => n.forward(g, p, h)?,
            None => h,
        };
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(s, h)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub(crate) fn timestep_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[timesteps.len(), dim], |i| {
        let (n, k) = (i / dim, i % dim);
        let freq_index = k % half.max(1);
        let freq = (-(10_000f64.ln()) * freq_index as f64 / half.max(1) as f64).exp();
        let arg = timesteps[n] as f64 * freq;
        T::lit(if k < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use histosynth_tensor::seeded;

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let e = timestep_embedding::<f64>(&[0, 1, 100], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.data()[0..8], e.data()[8..16]);
        // t = 0: sines 0, cosines 1
        assert_eq!(&e.data()[0..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn res_block_changes_width_and_keeps_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(0);
        let block = ResBlock::new(&mut store, "rb", 4, 8, Some(4), Some(6), &mut rng);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.constant(Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng));
        let t = g.constant(Tensor::randn(&[2, 6], 1.0, &mut rng));
        let y = block.forward(&mut g, &p, x, Some(t)).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 5, 5]);
    }
}
