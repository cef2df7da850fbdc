//! Snapshots attached to training aborts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The batch that produced a non-finite loss: patch ids plus per-item
/// summary statistics of the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSnapshot {
    pub step: u64,
    pub patch_ids: Vec<String>,
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub loss_terms: Vec<(String, f64)>,
}

impl BatchSnapshot {
    pub fn new<T: histosynth_tensor::Scalar>(
        step: u64,
        patch_ids: Vec<String>,
        input: &histosynth_tensor::Tensor<T>,
        loss_terms: Vec<(String, f64)>,
    ) -> Self {
        let n = input.shape().first().copied().unwrap_or(0).max(1);
        let per = input.numel() / n;
        let (mut input_min, mut input_max) = (Vec::new(), Vec::new());
        for chunk in input.data().chunks(per.max(1)) {
            let vals = chunk.iter().map(|v| v.as_f64());
            input_min.push(vals.clone().fold(f64::INFINITY, f64::min));
            input_max.push(vals.fold(f64::NEG_INFINITY, f64::max));
        }
        Self {
            step,
            patch_ids,
            input_min,
            input_max,
            loss_terms,
        }
    }
}

/// Fails with [`Error::NonFiniteLoss`] naming the first non-finite term.
pub(crate) fn ensure_finite<T: histosynth_tensor::Scalar>(
    step: u64,
    terms: &[(&str, f64)],
    patch_ids: &[String],
    input: &histosynth_tensor::Tensor<T>,
) -> Result<()> {
    if let Some((term, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        let loss_terms = terms.iter().map(|(n, v)| (n.to_string(), *v)).collect();
        return Err(Error::NonFiniteLoss {
            step,
            term: term.to_string(),
            snapshot: Box::new(BatchSnapshot::new(step, patch_ids.to_vec(), input, loss_terms)),
        });
    }
    Ok(())
}
