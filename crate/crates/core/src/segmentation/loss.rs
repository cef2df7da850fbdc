//! Combined soft-Dice and binary cross-entropy loss.

use histosynth_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing term of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` inside the log terms.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 0.5, ce: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.dice < 0.0 || self.ce < 0.0 || ((self.dice + self.ce) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and sum to 1, got {} + {}",
                self.dice, self.ce
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// `1 - soft_dice`.
    pub dice: f64,
    pub ce: f64,
}

fn check_inputs<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    probs.expect_same_shape(target)?;
    if probs.numel() == 0 {
        return Err(Error::Empty("loss over zero elements".into()));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("segmentation target must be binary, found {v}")));
    }
    if let Some(v) = probs.data().iter().find(|v| v.is_finite() && (**v < T::zero() || **v > T::one())) {
        return Err(Error::Validation(format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// `w.dice * (1 - soft_dice(p, y)) + w.ce * mean_bce(p, y)`, pooled over every element.
pub fn dice_ce_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, weights: LossWeights) -> Result<LossTerms> {
    Ok(dice_ce_loss_with_grad(probs, target, weights)?.0)
}

/// Loss value and its gradient with respect to `probs`.
pub fn dice_ce_loss_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    weights: LossWeights,
) -> Result<(LossTerms, Tensor<T>)> {
    check_inputs(probs, target)?;
    let n = probs.numel() as f64;
    let (mut inter, mut sum_p, mut sum_y, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in probs.data().iter().zip(target.data()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        inter += p * y;
        sum_p += p;
        sum_y += y;
        let pc = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let denom = sum_p + sum_y + DICE_SMOOTH;
    let soft_dice = (2.0 * inter + DICE_SMOOTH) / denom;
    let dice = 1.0 - soft_dice;
    let ce = bce / n;
    let terms = LossTerms {
        total: weights.dice * dice + weights.ce * ce,
        dice,
        ce,
    };
    let grad = probs.zip_map(target, |p, y| {
        let (p, y) = (p.as_f64(), y.as_f64());
        let d_dice = -(2.0 * y * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
        let d_ce = if p > CE_CLAMP && p < 1.0 - CE_CLAMP {
            (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        } else {
            0.0
        };
        T::lit(weights.dice * d_dice + weights.ce * d_ce)
    })?;
    Ok((terms, grad))
}
