//! Per-instance subtype reassignment, baseline patch samplers and
//! real/synthetic mixing.

use std::collections::{BTreeMap, HashMap};

use histosynth_tensor::{seeded, SeededRng};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::dataset::{DatasetItem, Method};
use crate::data::grid::SubtypeMask;
use crate::data::patch::LabeledPatch;
use crate::error::{Error, Result};
use crate::subtype::{SubtypeClass, NUM_CLASSES};

/// Redraws the subtype of every instance i.i.d. uniformly from `classes`.
///
/// Instances are visited in ascending id order, so the result depends only
/// on the patch contents and `seed`. Background pixels and instance geometry
/// are untouched.
pub fn randomize_instance_subtypes(
    patch: &LabeledPatch,
    classes: &[SubtypeClass],
    seed: u64,
) -> Result<SubtypeMask> {
    check_tumor_classes(classes)?;
    let mut rng = seeded(seed);
    let assignment: HashMap<u16, u8> = patch
        .instance_table()
        .into_iter()
        .map(|info| (info.id, classes[rng.random_range(0..classes.len())].code()))
        .collect();
    let mut mask = patch.mask.clone();
    for (code, &id) in mask.pixels_mut().iter_mut().zip(patch.instances.pixels()) {
        if id > 0 {
            *code = assignment[&id];
        }
    }
    Ok(mask)
}

/// [`randomize_instance_subtypes`] returning a full patch with the new mask.
pub fn randomized_patch(patch: &LabeledPatch, classes: &[SubtypeClass], seed: u64) -> Result<LabeledPatch> {
    let mask = randomize_instance_subtypes(patch, classes, seed)?;
    Ok(LabeledPatch {
        mask,
        ..patch.clone()
    })
}

fn check_tumor_classes(classes: &[SubtypeClass]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Config("reassignment class list is empty".into()));
    }
    if classes.contains(&SubtypeClass::Background) {
        return Err(Error::Config("background cannot be an instance subtype".into()));
    }
    Ok(())
}

/// Pearson χ² statistic and p-value of `counts` against a uniform distribution.
pub fn chi_square_uniformity(counts: &[usize]) -> Result<(f64, f64)> {
    if counts.len() < 2 {
        return Err(Error::Config("need at least two categories".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    Ok((stat, 1.0 - dist.cdf(stat)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    TumorSampled,
    SubtypeSampled,
}

impl SamplingKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplingKind::TumorSampled => "tumor_sampled",
            SamplingKind::SubtypeSampled => "subtype_sampled",
        }
    }
}

pub const DEFAULT_BACKGROUND_FRACTION: f64 = 0.2;

fn default_background_fraction() -> f64 {
    DEFAULT_BACKGROUND_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub seed: u64,
    /// Share of draws taken uniformly from background-only patches.
    #[serde(default = "default_background_fraction")]
    pub background_fraction: f64,
}

impl SamplingStrategy {
    pub fn new(kind: SamplingKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            background_fraction: DEFAULT_BACKGROUND_FRACTION,
        }
    }
}

/// Endless, seed-deterministic stream of patch indices.
#[derive(Debug, Clone)]
pub struct TrainingSampler {
    tumor: Vec<usize>,
    tumor_weights: Vec<f64>,
    tumor_dist: Option<WeightedIndex<f64>>,
    background: Vec<usize>,
    background_fraction: f64,
    rng: SeededRng,
}

/// Builds the sampler for `patches` under `strategy`.
///
/// With `subtype_sampled`, each tumor patch is weighted by the inverse corpus
/// pixel count of its dominant subtype, which equalizes the expected drawn
/// pixels per subtype when patches are single-subtype. Subtypes absent from
/// the corpus simply have no patches to draw and are reported with a warning.
pub fn build_training_sampler(patches: &[LabeledPatch], strategy: &SamplingStrategy) -> Result<TrainingSampler> {
    if patches.is_empty() {
        return Err(Error::Empty("sampler needs at least one patch".into()));
    }
    if !(0.0..=1.0).contains(&strategy.background_fraction) {
        return Err(Error::Config(format!(
            "background fraction {} outside [0, 1]",
            strategy.background_fraction
        )));
    }
    let mut tumor = Vec::new();
    let mut dominant = Vec::new();
    let mut background = Vec::new();
    let mut corpus = [0usize; NUM_CLASSES];
    for (i, p) in patches.iter().enumerate() {
        let hist = p.class_histogram();
        for (acc, h) in corpus.iter_mut().zip(hist).skip(1) {
            *acc += h;
        }
        match p.dominant_subtype() {
            Some(d) => {
                tumor.push(i);
                dominant.push(d);
            }
            None => background.push(i),
        }
    }
    let tumor_weights: Vec<f64> = match strategy.kind {
        SamplingKind::TumorSampled => vec![1.0; tumor.len()],
        SamplingKind::SubtypeSampled => {
            let absent: Vec<&str> = SubtypeClass::TUMOR
                .iter()
                .filter(|c| corpus[c.code() as usize] == 0)
                .map(|c| c.name())
                .collect();
            if !absent.is_empty() && !tumor.is_empty() {
                log::warn!("subtypes absent from corpus, excluded from balancing: {absent:?}");
            }
            dominant
                .iter()
                .map(|d| 1.0 / corpus[d.code() as usize] as f64)
                .collect()
        }
    };
    let tumor_dist = if tumor.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&tumor_weights).map_err(|e| Error::Config(format!("sampler weights: {e}")))?)
    };
    Ok(TrainingSampler {
        tumor,
        tumor_weights,
        tumor_dist,
        background,
        background_fraction: strategy.background_fraction,
        rng: seeded(strategy.seed),
    })
}

impl TrainingSampler {
    /// Draw probability of every patch index.
    pub fn probabilities(&self, n_patches: usize) -> Vec<f64> {
        let mut p = vec![0.0; n_patches];
        let bg_share = match (self.tumor.is_empty(), self.background.is_empty()) {
            (true, _) => 1.0,
            (false, true) => 0.0,
            (false, false) => self.background_fraction,
        };
        for &i in &self.background {
            p[i] = bg_share / self.background.len() as f64;
        }
        let total: f64 = self.tumor_weights.iter().sum();
        for (&i, &w) in self.tumor.iter().zip(&self.tumor_weights) {
            p[i] = (1.0 - bg_share) * w / total;
        }
        p
    }

    /// Weight of each tumor patch, keyed by patch index.
    pub fn tumor_weights(&self) -> BTreeMap<usize, f64> {
        self.tumor.iter().copied().zip(self.tumor_weights.iter().copied()).collect()
    }
}

impl Iterator for TrainingSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let take_background = match (&self.tumor_dist, self.background.is_empty()) {
            (None, _) => true,
            (Some(_), true) => false,
            (Some(_), false) => self.rng.random::<f64>() < self.background_fraction,
        };
        if take_background {
            Some(self.background[self.rng.random_range(0..self.background.len())])
        } else {
            let dist = self.tumor_dist.as_ref().expect("tumor patches exist");
            Some(self.tumor[dist.sample(&mut self.rng)])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Synthetic count over real count.
    pub ratio: f64,
    pub method: Method,
    pub seed: u64,
}

/// Number of synthetic items a mix of `real_len` real items requires.
pub fn synthetic_demand(ratio: f64, real_len: usize) -> Result<usize> {
    if !ratio.is_finite() || ratio < 0.0 {
        return Err(Error::Config(format!("mixing ratio {ratio} must be finite and non-negative")));
    }
    Ok((ratio * real_len as f64).floor() as usize)
}

/// All real items plus `floor(ratio * |real|)` synthetic items drawn without
/// replacement, shuffled together. A zero ratio returns `real` untouched.
pub fn mix_real_synthetic(real: &[DatasetItem], synthetic: &[DatasetItem], spec: &MixSpec) -> Result<Vec<DatasetItem>> {
    if spec.method == Method::Real {
        return Err(Error::Config("mixing method must be a synthesis method".into()));
    }
    let needed = synthetic_demand(spec.ratio, real.len())?;
    if needed == 0 {
        return Ok(real.to_vec());
    }
    if let Some(bad) = synthetic.iter().find(|s| s.provenance.method != spec.method) {
        return Err(Error::Validation(format!(
            "pool item {} was made by {}, expected {}",
            bad.id,
            bad.provenance.method.name(),
            spec.method.name()
        )));
    }
    if needed > synthetic.len() {
        return Err(Error::InsufficientPool {
            needed,
            available: synthetic.len(),
        });
    }
    let mut rng = seeded(spec.seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, synthetic.len(), needed).into_vec();
    picked.sort_unstable();
    let mut out: Vec<DatasetItem> = real.to_vec();
    out.extend(picked.into_iter().map(|i| synthetic[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}
