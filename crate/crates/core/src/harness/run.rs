//! Executing planned runs and recording their outcome.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::balance::{mix_real_synthetic, synthetic_demand, MixSpec};
use crate::data::dataset::{load_dataset, split_items, DatasetItem, Method, MANIFEST_FILE};
use crate::data::patch::LabeledPatch;
use crate::data::split::SplitName;
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_segmenter, EvalReport};
use crate::harness::ledger::{Ledger, LedgerEntry, RunState};
use crate::harness::pools::{file_digest, json_digest, prepare_generators, prepare_pool, Pool};
use crate::harness::spec::{plan_runs, stable_hash, Condition, ExperimentSpec, RunDescriptor};
use crate::segmentation::train_segmenter;

pub const RECORD_FILE: &str = "record.json";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSize {
    pub real: usize,
    pub synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Digest of the fully resolved run configuration.
    pub config_hash: String,
    pub label: String,
    pub condition: Condition,
    pub rep: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub wall_clock_secs: f64,
    /// Paths relative to the experiment output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub train_size: TrainSize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub label: String,
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixOutcome {
    /// In plan order.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

/// A loaded experiment: real splits, synthetic pools and the ledger.
#[derive(Debug)]
pub struct Harness {
    spec: ExperimentSpec,
    dataset_digest: String,
    train: Vec<DatasetItem>,
    val: Vec<LabeledPatch>,
    test: Vec<LabeledPatch>,
    pools: BTreeMap<Method, Pool>,
    ledger: Ledger,
}

impl Harness {
    /// Validates the spec and loads the real dataset.
    pub fn open(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let root = spec.resolved_dataset_root();
        let (manifest, items) = load_dataset(&root)?;
        let train = split_items(&manifest, &items, SplitName::Train);
        let patches = |split| split_items(&manifest, &items, split).into_iter().map(|i| i.patch).collect::<Vec<_>>();
        let (val, test) = (patches(SplitName::Val), patches(SplitName::Test));
        if train.is_empty() || test.is_empty() {
            return Err(Error::Empty(format!("{} lacks train or test patches", root.display())));
        }
        let ledger = Ledger::open(&spec.output_dir)?;
        Ok(Self {
            dataset_digest: file_digest(&root.join(MANIFEST_FILE))?,
            spec,
            train,
            val,
            test,
            pools: BTreeMap::new(),
            ledger,
        })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn real_train_len(&self) -> usize {
        self.train.len()
    }

    pub fn pool(&self, method: Method) -> Option<&Pool> {
        self.pools.get(&method)
    }

    pub fn plan(&self) -> Result<Vec<RunDescriptor>> {
        plan_runs(&self.spec)
    }

    /// Loads or builds the generators and one pool per method, sized for the
    /// largest ratio. Generators are dropped once the pools exist.
    pub fn prepare_pools(&mut self) -> Result<()> {
        let missing: Vec<Method> = self.spec.methods.iter().copied().filter(|m| !self.pools.contains_key(m)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let real: Vec<LabeledPatch> = self.train.iter().map(|i| i.patch.clone()).collect();
        let generators = prepare_generators(&self.spec, &real, &self.dataset_digest)?;
        let size = synthetic_demand(self.spec.max_ratio(), real.len())?;
        for method in missing {
            let pool = prepare_pool(&self.spec, method, &generators, &real, size, &self.dataset_digest)?;
            self.pools.insert(method, pool);
        }
        Ok(())
    }

    /// The configuration a run's outcome depends on, as canonical JSON.
    pub fn resolved_config(&self, d: &RunDescriptor) -> Result<serde_json::Value> {
        let mut seg = self.spec.seg.clone();
        let pool = match d.condition {
            Condition::Baseline { sampling } => {
                seg.sampling = sampling;
                None
            }
            Condition::Mixture { method, ratio } => {
                seg.sampling = self.spec.mixture_sampling;
                let pool = self.require_pool(method)?;
                Some(serde_json::json!({ "digest": pool.digest, "ratio": ratio }))
            }
        };
        Ok(serde_json::json!({
            "code_version": env!("CARGO_PKG_VERSION"),
            "dataset": self.dataset_digest,
            "condition": d.condition,
            "label": d.label,
            "rep": d.rep,
            "seed": d.seed,
            "seg": seg,
            "eval": self.spec.eval,
            "pool": pool,
        }))
    }

    fn require_pool(&self, method: Method) -> Result<&Pool> {
        self.pools
            .get(&method)
            .ok_or_else(|| Error::Config(format!("no {} pool prepared", method.name())))
    }

    /// Trains and evaluates one run. A stored record with the same config
    /// hash is returned as is unless `force` is set.
    pub fn execute_run(&self, d: &RunDescriptor, force: bool) -> Result<RunRecord> {
        let config = self.resolved_config(d)?;
        let config_hash = json_digest(&config)?;
        let dir = self.spec.output_dir.join(d.dir());
        let record_path = dir.join(RECORD_FILE);
        if !force {
            if let Some(record) = stored_record(&record_path, &config_hash)? {
                let latest = self.ledger.latest()?;
                if latest.get(&d.key()).is_none_or(|e| e.state != RunState::Done) {
                    self.finish(d, &record)?;
                }
                return Ok(record);
            }
        }
        self.ledger.mark(d, RunState::Running)?;
        let outcome = self.train_and_evaluate(d, config_hash, &dir).and_then(|record| {
            let tmp = record_path.with_extension("json.partial");
            fs::write(&tmp, serde_json::to_vec_pretty(&record)?).at(&tmp)?;
            fs::rename(&tmp, &record_path).at(&record_path)?;
            Ok(record)
        });
        match outcome {
            Ok(record) => {
                self.finish(d, &record)?;
                Ok(record)
            }
            Err(e) => {
                self.ledger.append(&LedgerEntry {
                    state: RunState::Failed,
                    descriptor: d.clone(),
                    record: None,
                    error: Some(e.to_string()),
                })?;
                Err(e)
            }
        }
    }

    fn finish(&self, d: &RunDescriptor, record: &RunRecord) -> Result<()> {
        self.ledger.append(&LedgerEntry {
            state: RunState::Done,
            descriptor: d.clone(),
            record: Some(record.clone()),
            error: None,
        })
    }

    fn train_and_evaluate(&self, d: &RunDescriptor, config_hash: String, dir: &Path) -> Result<RunRecord> {
        let started = Instant::now();
        let mut seg = self.spec.seg.clone();
        let (items, synthetic) = match d.condition {
            Condition::Baseline { sampling } => {
                seg.sampling = sampling;
                (self.train.clone(), 0)
            }
            Condition::Mixture { method, ratio } => {
                seg.sampling = self.spec.mixture_sampling;
                let pool = self.require_pool(method)?;
                let spec = MixSpec {
                    ratio,
                    method,
                    seed: d.seed ^ stable_hash("mix"),
                };
                let mixed = mix_real_synthetic(&self.train, &pool.items, &spec)?;
                let synthetic = mixed.len() - self.train.len();
                (mixed, synthetic)
            }
        };
        let patches: Vec<LabeledPatch> = items.into_iter().map(|i| i.patch).collect();
        info!("run {}: training on {} patches ({synthetic} synthetic)", d.key(), patches.len());
        let run = train_segmenter::<f32>(&patches, &self.val, seg, d.seed)?;
        fs::create_dir_all(dir).at(dir)?;
        let ckpt = dir.join(SEGMENTER_FILE);
        run.save(&ckpt)?;
        let report = evaluate_segmenter(&run.model, &self.test, self.spec.eval)?;
        let rel = d.dir();
        Ok(RunRecord {
            config_hash,
            label: d.label.clone(),
            condition: d.condition,
            rep: d.rep,
            seed: d.seed,
            report,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            artifacts: BTreeMap::from([
                ("segmenter".to_string(), rel.join(SEGMENTER_FILE)),
                ("record".to_string(), rel.join(RECORD_FILE)),
            ]),
            train_size: TrainSize {
                real: self.train.len(),
                synthetic,
            },
            best_epoch: run.best_epoch,
        })
    }

    /// Prepares pools and executes the whole plan on `spec.workers` threads.
    /// Failed runs are reported in the outcome and do not stop the others.
    pub fn run_all(&mut self, force: bool) -> Result<MatrixOutcome> {
        let plan = self.plan()?;
        let latest = self.ledger.latest()?;
        for d in &plan {
            if !latest.contains_key(&d.key()) {
                self.ledger.mark(d, RunState::Pending)?;
            }
        }
        self.prepare_pools()?;

        let queue = Mutex::new(plan.iter().enumerate().collect::<VecDeque<_>>());
        let results: Mutex<Vec<Option<Result<RunRecord, String>>>> = Mutex::new(vec![None; plan.len()]);
        let this: &Harness = self;
        std::thread::scope(|scope| {
            for _ in 0..this.spec.workers.min(plan.len()) {
                scope.spawn(|| loop {
                    let Some((i, d)) = queue.lock().unwrap_or_else(|e| e.into_inner()).pop_front() else {
                        break;
                    };
                    let outcome = this.execute_run(d, force).map_err(|e| {
                        warn!("run {} failed: {e}", d.key());
                        e.to_string()
                    });
                    results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(outcome);
                });
            }
        });

        let mut outcome = MatrixOutcome::default();
        let results = results.into_inner().unwrap_or_else(|e| e.into_inner());
        for (d, result) in plan.iter().zip(results) {
            match result.expect("every queued run reports back") {
                Ok(record) => outcome.records.push(record),
                Err(error) => outcome.failures.push(RunFailure {
                    label: d.label.clone(),
                    rep: d.rep,
                    error,
                }),
            }
        }
        Ok(outcome)
    }
}

fn stored_record(path: &Path, config_hash: &str) -> Result<Option<RunRecord>> {
    if !path.is_file() {
        return Ok(None);
    }
    match serde_json::from_slice::<RunRecord>(&fs::read(path).at(path)?) {
        Ok(record) if record.config_hash == config_hash => Ok(Some(record)),
        Ok(_) => {
            warn!("stored record {} is stale; rerunning", path.display());
            Ok(None)
        }
        Err(e) => {
            warn!("stored record {} is unreadable ({e}); rerunning", path.display());
            Ok(None)
        }
    }
}
