//! Variance-preserving noise schedules.

use histosynth_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `betas[t - 1]` is the variance added at step `t` (1-based);
/// `alpha_bars[t]` is the cumulative signal fraction, with `alpha_bars[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleTable", into = "ScheduleTable")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serialized form: only the betas, so a loaded table is always re-validated.
#[derive(Serialize, Deserialize)]
struct ScheduleTable {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleTable> for NoiseSchedule {
    type Error = Error;

    fn try_from(table: ScheduleTable) -> Result<Self> {
        Self::from_betas(table.betas)
    }
}

impl From<NoiseSchedule> for ScheduleTable {
    fn from(s: NoiseSchedule) -> Self {
        Self { betas: s.betas }
    }
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Validation(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn q_forward<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        x0.expect_same_shape(eps)?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let ab = self.alpha_bars[t];
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// Decreasing timesteps `T = tau_1 > ... > tau_k >= 1` visited by a sampler.
    pub fn respaced(&self, sample_steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if sample_steps == 0 || sample_steps > t {
            return Err(Error::Config(format!("sample_steps {sample_steps} must lie in 1..={t}")));
        }
        let mut out: Vec<usize> = (0..sample_steps)
            .map(|i| t - (i * t) / sample_steps)
            .collect();
        out.dedup();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use histosynth_tensor::seeded;

    #[test]
    fn alpha_bar_starts_at_one_and_decreases() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // product oracle
        let direct: f64 = (1..=200).map(|t| 1.0 - s.beta(t)).product();
        assert!((s.alpha_bar(200) - direct).abs() < 1e-15);
    }

    #[test]
    fn serialized_table_round_trips_and_is_validated() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NoiseSchedule>(&json).unwrap(), s);
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"betas":[0.2,0.1]}"#).is_err());
    }

    #[test]
    fn invalid_betas_are_rejected() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.05]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn t_zero_is_identity_and_out_of_range_fails() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut rng = seeded(0);
        let x = Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng);
        let e = Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng);
        assert_eq!(s.q_forward(&x, 0, &e).unwrap(), x);
        assert!(s.q_forward(&x, 11, &e).is_err());
    }

    #[test]
    fn respacing_starts_at_t_and_strictly_decreases() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let taus = s.respaced(50).unwrap();
        assert_eq!(taus.len(), 50);
        assert_eq!(taus[0], 200);
        assert!(taus.windows(2).all(|w| w[1] < w[0]));
        assert!(*taus.last().unwrap() >= 1);
        assert_eq!(s.respaced(200).unwrap(), (1..=200).rev().collect::<Vec<_>>());
        assert!(s.respaced(201).is_err());
    }
}
