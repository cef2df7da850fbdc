//! Spatially-adaptive normalization.

use histosynth_tensor::nn::{Conv2d, Init};
use histosynth_tensor::{Bound, Graph, ParamStore, Scalar, SeededRng, Tensor, Var};

use crate::error::{Error, Result};

/// Batch-norm epsilon; also decides the zero-variance convention.
pub const SPADE_EPS: f64 = 1e-5;

/// Mask-conditioned per-pixel scale and shift:
/// a shared conv with ReLU, then separate `gamma` and `beta` convs.
///
/// The gamma conv starts with bias 1 so a fresh head is close to the
/// identity modulation.
#[derive(Debug, Clone)]
pub struct SpadeHead {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub channels: usize,
    pub label_channels: usize,
}

impl SpadeHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        label_channels: usize,
        hidden: usize,
        channels: usize,
        kernel: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let pad = kernel / 2;
        let shared = Conv2d::with(store, &format!("{name}.shared"), label_channels, hidden, kernel, 1, pad, Init::He(1.0), rng);
        let gamma = Conv2d::with(store, &format!("{name}.gamma"), hidden, channels, kernel, 1, pad, Init::He(0.1), rng);
        let beta = Conv2d::with(store, &format!("{name}.beta"), hidden, channels, kernel, 1, pad, Init::He(0.1), rng);
        if let Some(b) = gamma.bias {
            *store.get_mut(b) = Tensor::full(&[channels], T::one());
        }
        Self {
            shared,
            gamma,
            beta,
            channels,
            label_channels,
        }
    }

    /// `(gamma, beta)` maps for a one-hot mask already at activation resolution.
    pub fn maps<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mask: Var) -> Result<(Var, Var)> {
        let h = self.shared.forward(g, p, mask)?;
        let h = g.relu(h);
        let gamma = self.gamma.forward(g, p, h)?;
        let beta = self.beta.forward(g, p, h)?;
        Ok((gamma, beta))
    }

    /// `batch_norm(x) * gamma(mask) + beta(mask)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Var) -> Result<Var> {
        let xs = g.value(x).dims4()?;
        let ms = g.value(mask).dims4()?;
        if xs.1 != self.channels || ms.1 != self.label_channels || (xs.0, xs.2, xs.3) != (ms.0, ms.2, ms.3) {
            return Err(Error::Shape(format!(
                "spade: activations {:?} and mask {:?} do not fit a head for {} channels and {} labels",
                g.value(x).shape(),
                g.value(mask).shape(),
                self.channels,
                self.label_channels
            )));
        }
        let xn = g.batch_norm(x, SPADE_EPS)?;
        let (gamma, beta) = self.maps(g, p, mask)?;
        let scaled = g.mul(xn, gamma)?;
        Ok(g.add(scaled, beta)?)
    }
}

/// Applies `head` to concrete tensors; `store` holds the head's parameters.
pub fn spade_modulation<T: Scalar>(
    activations: &Tensor<T>,
    mask: &Tensor<T>,
    head: &SpadeHead,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = g.bind_frozen(store);
    let x = g.constant(activations.clone());
    let m = g.constant(mask.clone());
    let out = head.forward(&mut g, &p, x, m)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use histosynth_tensor::seeded;

    fn one_hot(labels: &[usize], k: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[1, k, h, w]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[l * h * w + i] = 1.0;
        }
        t
    }

    fn head(kernel: usize, seed: u64) -> (ParamStore<f64>, SpadeHead) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let h = SpadeHead::new(&mut store, "s", 3, 5, 2, kernel, &mut rng);
        (store, h)
    }

    /// Per-channel standardization over all pixels, computed directly.
    fn standardize(x: &Tensor<f64>) -> Vec<f64> {
        let (_, c, h, w) = x.dims4().unwrap();
        let n = h * w;
        let mut out = vec![0.0; x.numel()];
        for ch in 0..c {
            let v = &x.data()[ch * n..(ch + 1) * n];
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                out[ch * n + i] = (v[i] - mean) / (var + SPADE_EPS).sqrt();
            }
        }
        out
    }

    #[test]
    fn identity_modulation_returns_normalized_activations() {
        let (mut store, h) = head(3, 1);
        // gamma = 1, beta = 0 everywhere: zero the conv weights, keep gamma bias 1.
        for (name, t) in store.iter_mut() {
            if name.starts_with("s.beta") || name == "s.gamma.weight" {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut rng = seeded(2);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 3.0, &mut rng);
        let m = one_hot(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0], 3, 4, 4);
        let y = spade_modulation(&x, &m, &h, &store).unwrap();
        for (a, b) in y.data().iter().zip(standardize(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_activations_output_beta_exactly() {
        let (store, h) = head(3, 3);
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| if i < 16 { 0.7 } else { -2.5 });
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let m = one_hot(&labels, 3, 4, 4);
        let y = spade_modulation(&x, &m, &h, &store).unwrap();
        let mut g = Graph::new();
        let p = g.bind_frozen(&store);
        let mv = g.constant(m);
        let (_, beta) = h.maps(&mut g, &p, mv).unwrap();
        assert_eq!(y.data(), g.value(beta).data());
    }

    #[test]
    fn changes_stay_within_the_receptive_field() {
        // A 3x3 shared conv followed by 3x3 gamma/beta convs sees 2 pixels each way.
        let (store, h) = head(3, 4);
        let mut rng = seeded(5);
        let x = Tensor::<f64>::randn(&[1, 2, 9, 9], 1.0, &mut rng);
        let a: Vec<usize> = vec![0; 81];
        let mut b = a.clone();
        b[4 * 9 + 4] = 2;
        let ya = spade_modulation(&x, &one_hot(&a, 3, 9, 9), &h, &store).unwrap();
        let yb = spade_modulation(&x, &one_hot(&b, 3, 9, 9), &h, &store).unwrap();
        for ch in 0..2 {
            for y in 0..9usize {
                for xx in 0..9usize {
                    let i = ch * 81 + y * 9 + xx;
                    let inside = y.abs_diff(4) <= 2 && xx.abs_diff(4) <= 2;
                    if !inside {
                        assert_eq!(ya.data()[i], yb.data()[i], "({xx},{y})");
                    }
                }
            }
        }
        assert_ne!(ya.data(), yb.data());
    }

    #[test]
    fn pointwise_head_commutes_with_pixel_permutation() {
        let (store, h) = head(1, 6);
        let mut rng = seeded(7);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 3).collect();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let permute = |t: &Tensor<f64>, c: usize| {
            Tensor::from_fn(&[1, c, 3, 4], |i| {
                let (ch, px) = (i / 12, i % 12);
                t.data()[ch * 12 + perm[px]]
            })
        };
        let m = one_hot(&labels, 3, 3, 4);
        let y = spade_modulation(&x, &m, &h, &store).unwrap();
        let yp = spade_modulation(&permute(&x, 2), &permute(&m, 3), &h, &store).unwrap();
        for (a, b) in permute(&y, 2).data().iter().zip(yp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_mask_is_a_shape_error() {
        let (store, h) = head(3, 8);
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let m = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(matches!(spade_modulation(&x, &m, &h, &store), Err(Error::Shape(_))));
    }
}
