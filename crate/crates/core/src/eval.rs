//! Tumor Dice, per-subtype recall, subtype variance and run aggregation.

use std::collections::BTreeMap;

use histosynth_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::data::grid::{Grid, SubtypeMask};
use crate::data::patch::LabeledPatch;
use crate::error::{Error, Result};
use crate::segmentation::Segmenter;
use crate::subtype::{SubtypeClass, NUM_CLASSES};

fn check_binary(grid: &Grid<u8>, what: &str) -> Result<()> {
    if let Some(v) = grid.pixels().iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

fn check_dims<P: Copy, Q: Copy>(a: &Grid<P>, b: &Grid<Q>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)`, with two empty masks scoring 1.
pub fn dice_score(pred: &Grid<u8>, target: &Grid<u8>) -> Result<f64> {
    check_dims(pred, target)?;
    check_binary(pred, "prediction")?;
    check_binary(target, "target")?;
    let mut c = DiceCounts::default();
    c.add(pred, target);
    Ok(c.dice())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct DiceCounts {
    inter: u64,
    pred: u64,
    truth: u64,
}

impl DiceCounts {
    fn add(&mut self, pred: &Grid<u8>, target: &Grid<u8>) {
        for (&p, &t) in pred.pixels().iter().zip(target.pixels()) {
            self.inter += u64::from(p == 1 && t == 1);
            self.pred += u64::from(p);
            self.truth += u64::from(t);
        }
    }

    fn dice(&self) -> f64 {
        if self.pred + self.truth == 0 {
            1.0
        } else {
            2.0 * self.inter as f64 / (self.pred + self.truth) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct RecallCounts {
    hits: [u64; NUM_CLASSES],
    support: [u64; NUM_CLASSES],
}

impl RecallCounts {
    fn add(&mut self, pred: &Grid<u8>, mask: &SubtypeMask) {
        for (&p, &m) in pred.pixels().iter().zip(mask.pixels()) {
            let k = (m as usize).min(NUM_CLASSES - 1);
            self.support[k] += 1;
            self.hits[k] += u64::from(p == 1);
        }
    }

    fn recalls(&self) -> BTreeMap<SubtypeClass, f64> {
        SubtypeClass::TUMOR
            .iter()
            .filter(|c| self.support[c.code() as usize] > 0)
            .map(|&c| {
                let k = c.code() as usize;
                (c, self.hits[k] as f64 / self.support[k] as f64)
            })
            .collect()
    }
}

/// Fraction of each present tumor subtype's pixels predicted as tumor.
/// Subtypes without pixels are left out.
pub fn per_subtype_recall(pred: &Grid<u8>, mask: &SubtypeMask) -> Result<BTreeMap<SubtypeClass, f64>> {
    check_dims(pred, mask)?;
    check_binary(pred, "prediction")?;
    let mut c = RecallCounts::default();
    c.add(pred, mask);
    Ok(c.recalls())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Pixel counts summed over all patches before any ratio is taken.
    #[default]
    Micro,
    /// Metrics computed per patch, then averaged over patches where defined.
    PerPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EvalConfig {
    pub pooling: Pooling,
    pub variance: VarianceMode,
    /// Add `cis` to the four HER2 recalls entering the variance.
    pub include_cis: bool,
}

impl EvalConfig {
    pub fn variance_classes(&self) -> Vec<SubtypeClass> {
        let mut classes = SubtypeClass::HER2.to_vec();
        if self.include_cis {
            classes.push(SubtypeClass::Cis);
        }
        classes
    }
}

/// Variance of the recalls of `classes`; every one of them must be present.
pub fn subtype_variance_of(recalls: &BTreeMap<SubtypeClass, f64>, classes: &[SubtypeClass], mode: VarianceMode) -> Result<f64> {
    let missing: Vec<String> = classes
        .iter()
        .filter(|c| !recalls.contains_key(c))
        .map(|c| c.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSubtypes(missing));
    }
    let values: Vec<f64> = classes.iter().map(|c| recalls[c]).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(match mode {
        VarianceMode::Population => ss / n,
        VarianceMode::Sample if values.len() > 1 => ss / (n - 1.0),
        VarianceMode::Sample => 0.0,
    })
}

/// Population variance of the four HER2 recalls.
pub fn subtype_variance(recalls: &BTreeMap<SubtypeClass, f64>) -> Result<f64> {
    subtype_variance_of(recalls, &SubtypeClass::HER2, VarianceMode::Population)
}

/// Share of a subtype's pixels predicted tumor and background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub tumor: f64,
    pub background: f64,
}

impl ConfusionRow {
    pub fn from_recall(recall: f64) -> Self {
        Self {
            tumor: recall,
            background: 1.0 - recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub recalls: BTreeMap<SubtypeClass, f64>,
    pub subtype_variance: f64,
    pub confusion_rows: BTreeMap<SubtypeClass, ConfusionRow>,
    /// Pixel count per tumor subtype in the evaluated ground truth.
    pub support: BTreeMap<SubtypeClass, u64>,
    pub config: EvalConfig,
}

impl EvalReport {
    /// Recomputes the variance from the stored recalls.
    pub fn recomputed_variance(&self) -> Result<f64> {
        subtype_variance_of(&self.recalls, &self.config.variance_classes(), self.config.variance)
    }
}

/// Scores predicted binary masks against labeled patches.
pub fn evaluate_predictions(preds: &[Grid<u8>], truth: &[&LabeledPatch], config: EvalConfig) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} patches", preds.len(), truth.len())));
    }
    if preds.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let mut dice = DiceCounts::default();
    let mut recall = RecallCounts::default();
    let mut patch_dice = Vec::with_capacity(preds.len());
    let mut patch_recalls: BTreeMap<SubtypeClass, Vec<f64>> = BTreeMap::new();
    for (pred, patch) in preds.iter().zip(truth) {
        check_dims(pred, &patch.mask)?;
        check_binary(pred, "prediction")?;
        let target = patch.tumor_target();
        dice.add(pred, &target);
        recall.add(pred, &patch.mask);
        if config.pooling == Pooling::PerPatch {
            patch_dice.push(dice_score(pred, &target)?);
            for (c, r) in per_subtype_recall(pred, &patch.mask)? {
                patch_recalls.entry(c).or_default().push(r);
            }
        }
    }
    let (dice, recalls) = match config.pooling {
        Pooling::Micro => (dice.dice(), recall.recalls()),
        Pooling::PerPatch => (
            mean(&patch_dice),
            patch_recalls.iter().map(|(&c, v)| (c, mean(v))).collect(),
        ),
    };
    let subtype_variance = subtype_variance_of(&recalls, &config.variance_classes(), config.variance)?;
    let confusion_rows = recalls.iter().map(|(&c, &r)| (c, ConfusionRow::from_recall(r))).collect();
    let support = SubtypeClass::TUMOR
        .iter()
        .map(|&c| (c, recall.support[c.code() as usize]))
        .filter(|(_, n)| *n > 0)
        .collect();
    Ok(EvalReport {
        dice,
        recalls,
        subtype_variance,
        confusion_rows,
        support,
        config,
    })
}

/// Runs `model` over `patches` and scores the thresholded predictions.
pub fn evaluate_segmenter<T: Scalar>(model: &Segmenter<T>, patches: &[LabeledPatch], config: EvalConfig) -> Result<EvalReport> {
    let preds = patches
        .iter()
        .map(|p| Ok(model.predict(&p.image)?.binary))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, &patches.iter().collect::<Vec<_>>(), config)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean, sample standard deviation and range of one metric over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarize".into()));
        }
        let n = values.len();
        let m = mean(values);
        let std = if n > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            n,
            mean: m,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: Vec<EvalReport>,
    /// Seed of each run, when known, aligned with `runs`.
    pub seeds: Vec<u64>,
    pub dice: MetricStats,
    pub subtype_variance: MetricStats,
    /// Over the runs in which the subtype was present.
    pub recalls: BTreeMap<SubtypeClass, MetricStats>,
    /// Confusion rows built from the mean recalls.
    pub confusion_rows: BTreeMap<SubtypeClass, ConfusionRow>,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::Empty("no runs to aggregate".into()));
    }
    let dice = MetricStats::of(&reports.iter().map(|r| r.dice).collect::<Vec<_>>())?;
    let subtype_variance = MetricStats::of(&reports.iter().map(|r| r.subtype_variance).collect::<Vec<_>>())?;
    let mut per_class: BTreeMap<SubtypeClass, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (&c, &v) in &r.recalls {
            per_class.entry(c).or_default().push(v);
        }
    }
    let recalls = per_class
        .iter()
        .map(|(&c, v)| Ok((c, MetricStats::of(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let confusion_rows = recalls.iter().map(|(&c, s)| (c, ConfusionRow::from_recall(s.mean))).collect();
    Ok(RunAggregate {
        runs: reports.to_vec(),
        seeds: Vec::new(),
        dice,
        subtype_variance,
        recalls,
        confusion_rows,
    })
}

impl RunAggregate {
    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Result<Self> {
        if seeds.len() != self.runs.len() {
            return Err(Error::Shape(format!("{} seeds for {} runs", seeds.len(), self.runs.len())));
        }
        self.seeds = seeds;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::RgbImage;
    use histosynth_tensor::seeded;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn grid(w: usize, v: &[u8]) -> Grid<u8> {
        Grid::from_vec(w, v.len() / w, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = grid(2, &[1, 0, 1, 1]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&grid(2, &[1, 1, 0, 0]), &grid(2, &[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice_score(&grid(2, &[0; 4]), &grid(2, &[0; 4])).unwrap(), 1.0);
        // |P| = 6, |T| = 4, overlap 3
        let p = grid(4, &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let t = grid(4, &[0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((dice_score(&p, &t).unwrap() - 0.6).abs() < 1e-15);
        assert!(dice_score(&grid(2, &[2, 0, 0, 0]), &a).is_err());
        assert!(dice_score(&grid(1, &[1, 0]), &a).is_err());
    }

    #[test]
    fn recall_examples() {
        // her2_1 has 10 pixels, 7 predicted
        let mask = SubtypeMask::from_vec(4, 3, vec![2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 0, 0]).unwrap();
        let pred = grid(4, &[1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 0]);
        let r = per_subtype_recall(&pred, &mask).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[&SubtypeClass::Her2One] - 0.7).abs() < 1e-15);
        let all = per_subtype_recall(&grid(4, &[1; 12]), &mask).unwrap();
        assert_eq!(all[&SubtypeClass::Her2One], 1.0);
        assert!(!all.contains_key(&SubtypeClass::Her2Zero));
    }

    fn her2(values: [f64; 4]) -> BTreeMap<SubtypeClass, f64> {
        SubtypeClass::HER2.into_iter().zip(values).collect()
    }

    #[test]
    fn variance_examples() {
        assert_eq!(subtype_variance(&her2([0.7; 4])).unwrap(), 0.0);
        assert!((subtype_variance(&her2([0.8, 0.9, 1.0, 0.9])).unwrap() - 0.005).abs() < 1e-15);
        assert_eq!(subtype_variance(&her2([1.0, 0.0, 1.0, 0.0])).unwrap(), 0.25);
        let sample = subtype_variance_of(&her2([1.0, 0.0, 1.0, 0.0]), &SubtypeClass::HER2, VarianceMode::Sample).unwrap();
        assert!((sample - 1.0 / 3.0).abs() < 1e-15);
        let mut partial = her2([0.5; 4]);
        partial.remove(&SubtypeClass::Her2Two);
        partial.remove(&SubtypeClass::Her2Zero);
        match subtype_variance(&partial) {
            Err(Error::MissingSubtypes(m)) => assert_eq!(m, vec!["her2_0", "her2_2"]),
            other => panic!("{other:?}"),
        }
    }

    fn patch(mask: SubtypeMask) -> LabeledPatch {
        let (w, h) = mask.dims();
        LabeledPatch {
            image: RgbImage::filled(w, h, [0, 0, 0]),
            instances: mask.map(u16::from),
            mask,
            slide_id: "s".into(),
            origin: (0, 0),
        }
    }

    #[test]
    fn report_rows_sum_to_one_and_variance_recomputes() {
        let mask = SubtypeMask::from_vec(5, 2, vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 0]).unwrap();
        let pred = grid(5, &[1, 0, 1, 1, 0, 0, 1, 1, 1, 1]);
        let p = patch(mask);
        let r = evaluate_predictions(std::slice::from_ref(&pred), &[&p], EvalConfig::default()).unwrap();
        for row in r.confusion_rows.values() {
            assert_eq!(row.tumor + row.background, 1.0);
        }
        assert_eq!(r.recomputed_variance().unwrap(), r.subtype_variance);
        assert_eq!(r.support[&SubtypeClass::Cis], 1);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn per_patch_pooling_averages_patch_metrics() {
        let a = patch(SubtypeMask::from_vec(4, 1, vec![1, 2, 3, 4]).unwrap());
        let b = patch(SubtypeMask::from_vec(4, 1, vec![1, 1, 3, 4]).unwrap());
        let preds = [grid(4, &[1, 1, 1, 1]), grid(4, &[0, 1, 1, 1])];
        let config = EvalConfig { pooling: Pooling::PerPatch, ..EvalConfig::default() };
        let r = evaluate_predictions(&preds, &[&a, &b], config).unwrap();
        // patch dices 1 and 2*3/(3+4)
        assert!((r.dice - (1.0 + 6.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((r.recalls[&SubtypeClass::Her2Zero] - 0.75).abs() < 1e-15);
        let micro = evaluate_predictions(&preds, &[&a, &b], EvalConfig::default()).unwrap();
        assert!((micro.recalls[&SubtypeClass::Her2Zero] - 2.0 / 3.0).abs() < 1e-15);
    }

    fn report(dice: f64) -> EvalReport {
        let recalls = her2([dice; 4]);
        EvalReport {
            dice,
            confusion_rows: recalls.iter().map(|(&c, &r)| (c, ConfusionRow::from_recall(r))).collect(),
            recalls,
            subtype_variance: 0.0,
            support: BTreeMap::new(),
            config: EvalConfig::default(),
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate_runs(&[report(0.8)]).unwrap();
        assert_eq!((one.dice.mean, one.dice.std, one.dice.min, one.dice.max), (0.8, 0.0, 0.8, 0.8));
        let two = aggregate_runs(&[report(0.8), report(0.9)]).unwrap();
        assert!((two.dice.mean - 0.85).abs() < 1e-15);
        assert_eq!((two.dice.min, two.dice.max), (0.8, 0.9));
        let five = aggregate_runs(&vec![report(0.7); 5]).unwrap();
        assert_eq!(five.dice.std, 0.0);
        assert_eq!(five.subtype_variance.std, 0.0);
        assert!(five.recalls.values().all(|s| s.std == 0.0));
        assert!(aggregate_runs(&[]).is_err());
        assert!(one.with_seeds(vec![1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(0u8..2, 36),
            b in proptest::collection::vec(0u8..2, 36),
            seed in any::<u64>(),
        ) {
            let (pa, pb) = (grid(6, &a), grid(6, &b));
            let d = dice_score(&pa, &pb).unwrap();
            prop_assert_eq!(d, dice_score(&pb, &pa).unwrap());
            let mut order: Vec<usize> = (0..36).collect();
            order.shuffle(&mut seeded(seed));
            let perm = |v: &[u8]| grid(6, &order.iter().map(|&i| v[i]).collect::<Vec<_>>());
            prop_assert_eq!(d, dice_score(&perm(&a), &perm(&b)).unwrap());
        }

        #[test]
        fn recalls_and_variance_stay_in_range(
            pred in proptest::collection::vec(0u8..2, 64),
            mask in proptest::collection::vec(0u8..6, 64),
        ) {
            let r = per_subtype_recall(&grid(8, &pred), &SubtypeMask::from_vec(8, 8, mask).unwrap()).unwrap();
            prop_assert!(r.values().all(|v| (0.0..=1.0).contains(v)));
            if let Ok(v) = subtype_variance(&r) {
                prop_assert!((0.0..=0.25).contains(&v));
            }
        }
    }
}
