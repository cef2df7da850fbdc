//! Experiment specification and run planning.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::SamplingKind;
use crate::data::dataset::{dataset_root_or, Method};
use crate::diffusion::{AutoencoderConfig, LdmConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::gan::GanConfig;
use crate::segmentation::SegConfig;
use crate::DATA_ROOT_ENV;

fn default_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0]
}

fn default_repetitions() -> usize {
    5
}

fn default_workers() -> usize {
    1
}

fn default_mixture_sampling() -> SamplingKind {
    SamplingKind::SubtypeSampled
}

/// Where a generator comes from: an existing checkpoint, or training from
/// scratch with `train`. A checkpoint wins when both are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "C: Deserialize<'de>"))]
pub struct GeneratorSource<C> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<C>,
}

impl<C> Default for GeneratorSource<C> {
    fn default() -> Self {
        Self {
            checkpoint: None,
            train: None,
        }
    }
}

impl<C> GeneratorSource<C> {
    pub fn from_checkpoint(path: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: Some(path.into()),
            train: None,
        }
    }

    pub fn trained(config: C) -> Self {
        Self {
            checkpoint: None,
            train: Some(config),
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        match (&self.checkpoint, &self.train) {
            (Some(path), _) if !path.is_file() => {
                Err(Error::Config(format!("{what} checkpoint {} does not exist", path.display())))
            }
            (None, None) => Err(Error::Config(format!("{what} needs a checkpoint or a training config"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Overridden by the `HISTOSYNTH_DATA_ROOT` environment variable.
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub baselines: Vec<SamplingKind>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Patch sampling used when training on a real plus synthetic mix.
    #[serde(default = "default_mixture_sampling")]
    pub mixture_sampling: SamplingKind,
    #[serde(default)]
    pub gan: GeneratorSource<GanConfig>,
    #[serde(default)]
    pub autoencoder: GeneratorSource<AutoencoderConfig>,
    #[serde(default)]
    pub ldm: GeneratorSource<LdmConfig>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ExperimentSpec {
    /// A spec with default matrix settings and no conditions selected.
    pub fn new(dataset_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            output_dir: output_dir.into(),
            baselines: Vec::new(),
            methods: Vec::new(),
            ratios: default_ratios(),
            repetitions: default_repetitions(),
            base_seed: 0,
            seg: SegConfig::default(),
            eval: EvalConfig::default(),
            mixture_sampling: default_mixture_sampling(),
            gan: GeneratorSource::default(),
            autoencoder: GeneratorSource::default(),
            ldm: GeneratorSource::default(),
            workers: default_workers(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn resolved_dataset_root(&self) -> PathBuf {
        dataset_root_or(self.dataset_root.clone(), DATA_ROOT_ENV)
    }

    pub fn validate(&self) -> Result<()> {
        if self.baselines.is_empty() && self.methods.is_empty() {
            return Err(Error::Config("the matrix has neither baselines nor methods".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.methods.contains(&Method::Real) {
            return Err(Error::Config("`real` is not a synthesis method".into()));
        }
        if !self.methods.is_empty() && self.ratios.is_empty() {
            return Err(Error::Config("methods are given but no ratios".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Config(format!("ratio {r} must be positive")));
        }
        let mut sorted = self.ratios.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate ratios".into()));
        }
        self.seg.validate()?;
        if self.methods.contains(&Method::Gan) {
            self.gan.check("gan")?;
        }
        if self.methods.iter().any(|m| matches!(m, Method::Diffusion | Method::Inpaint)) {
            self.autoencoder.check("autoencoder")?;
            self.ldm.check("diffusion")?;
        }
        Ok(())
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// What a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    /// Real training patches only, drawn with the given sampling.
    Baseline { sampling: SamplingKind },
    /// Real patches plus `ratio` times as many synthetic ones.
    Mixture { method: Method, ratio: f64 },
}

impl Condition {
    /// `baseline:subtype_sampled`, `diffusion@1.0`, ...
    pub fn label(&self) -> String {
        match self {
            Condition::Baseline { sampling } => format!("baseline:{}", sampling.name()),
            Condition::Mixture { method, ratio } => format!("{}@{ratio:?}", method.name()),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub condition: Condition,
    pub label: String,
    /// Zero-based repetition index.
    pub rep: usize,
    pub seed: u64,
}

impl RunDescriptor {
    /// `label#rep`, unique within a plan.
    pub fn key(&self) -> String {
        run_key(&self.label, self.rep)
    }

    /// Output directory of this run, relative to the experiment output.
    pub fn dir(&self) -> PathBuf {
        PathBuf::from("runs").join(self.label.replace(':', "-")).join(format!("rep{}", self.rep))
    }
}

pub(crate) fn run_key(label: &str, rep: usize) -> String {
    format!("{label}#{rep}")
}

/// First eight bytes of `sha256(text)`, little endian.
pub(crate) fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest holds 32 bytes"))
}

/// `base_seed ^ stable_hash("label#rep")`; independent of the rest of the plan.
pub fn run_seed(base_seed: u64, label: &str, rep: usize) -> u64 {
    base_seed ^ stable_hash(&run_key(label, rep))
}

/// Baselines first, then methods by ratio, each over all repetitions.
pub fn plan_runs(spec: &ExperimentSpec) -> Result<Vec<RunDescriptor>> {
    spec.validate()?;
    let mut conditions: Vec<Condition> = spec.baselines.iter().map(|&sampling| Condition::Baseline { sampling }).collect();
    for &method in &spec.methods {
        conditions.extend(spec.ratios.iter().map(|&ratio| Condition::Mixture { method, ratio }));
    }
    let mut plan = Vec::with_capacity(conditions.len() * spec.repetitions);
    let mut seen = std::collections::BTreeSet::new();
    for condition in conditions {
        let label = condition.label();
        if !seen.insert(label.clone()) {
            return Err(Error::Config(format!("condition {label} appears twice")));
        }
        for rep in 0..spec.repetitions {
            plan.push(RunDescriptor {
                condition,
                label: label.clone(),
                rep,
                seed: run_seed(spec.base_seed, &label, rep),
            });
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_matrix() -> ExperimentSpec {
        let mut s = ExperimentSpec::new("data", "out");
        s.baselines = vec![SamplingKind::TumorSampled, SamplingKind::SubtypeSampled];
        s.methods = vec![Method::Gan, Method::Diffusion, Method::Inpaint];
        s.gan = GeneratorSource::trained(GanConfig::default());
        s.autoencoder = GeneratorSource::trained(AutoencoderConfig::default());
        s.ldm = GeneratorSource::trained(LdmConfig::default());
        s
    }

    #[test]
    fn full_matrix_has_seventy_runs() {
        let plan = plan_runs(&full_matrix()).unwrap();
        assert_eq!(plan.len(), 70);
        let keys: std::collections::BTreeSet<_> = plan.iter().map(RunDescriptor::key).collect();
        assert_eq!(keys.len(), 70);
        assert_eq!(plan[0].label, "baseline:tumor_sampled");
        assert!(plan.iter().any(|d| d.label == "diffusion@1.0" && d.rep == 4));
        assert!(plan.iter().any(|d| d.label == "inpaint@0.5"));
    }

    #[test]
    fn single_baseline_single_rep_is_one_run() {
        let mut s = ExperimentSpec::new("data", "out");
        s.baselines = vec![SamplingKind::SubtypeSampled];
        s.repetitions = 1;
        assert_eq!(plan_runs(&s).unwrap().len(), 1);
    }

    #[test]
    fn planning_is_deterministic_and_seeds_are_stable() {
        let a = plan_runs(&full_matrix()).unwrap();
        assert_eq!(a, plan_runs(&full_matrix()).unwrap());
        let mut smaller = full_matrix();
        smaller.methods = vec![Method::Diffusion];
        smaller.baselines.clear();
        for d in plan_runs(&smaller).unwrap() {
            let same = a.iter().find(|x| x.key() == d.key()).unwrap();
            assert_eq!(same.seed, d.seed);
        }
        let mut shifted = full_matrix();
        shifted.base_seed = 7;
        let b = plan_runs(&shifted).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.seed ^ y.seed == 7));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let empty = ExperimentSpec::new("data", "out");
        assert!(plan_runs(&empty).is_err());
        let mut s = full_matrix();
        s.repetitions = 0;
        assert!(s.validate().is_err());
        let mut s = full_matrix();
        s.ratios = vec![1.0, -0.5];
        assert!(s.validate().is_err());
        let mut s = full_matrix();
        s.gan = GeneratorSource::default();
        assert!(s.validate().is_err());
        let mut s = full_matrix();
        s.ldm = GeneratorSource::from_checkpoint("/no/such/file.ckpt");
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trips_with_defaults() {
        let s = full_matrix();
        let back: ExperimentSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let minimal: ExperimentSpec =
            serde_json::from_str(r#"{"dataset_root": "d", "output_dir": "o", "baselines": ["subtype_sampled"]}"#).unwrap();
        assert_eq!(minimal.repetitions, 5);
        assert_eq!(minimal.ratios, vec![0.5, 1.0, 2.0, 4.0]);
    }
}
