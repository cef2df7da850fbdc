use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use histosynth::balance::SamplingKind;
use histosynth::data::{generate_phantom_dataset, load_dataset, split_items, Method, PhantomDatasetConfig, SplitName};
use histosynth::diffusion::{AutoencoderConfig, DenoiserConfig, LdmConfig, NoiseSchedule};
use histosynth::gan::GanConfig;
use histosynth::harness::{
    emit_report, load_records, read_latest, state_counts, ExperimentSpec, GeneratorSource, Harness, RunState, LEDGER_FILE,
};
use histosynth::segmentation::SegConfig;
use histosynth::SubtypeClass;

fn write_phantom(root: &Path) {
    let data = generate_phantom_dataset(&PhantomDatasetConfig {
        slides: 8,
        slide_size: 128,
        patch_size: 32,
        stride: 32,
        instances_per_slide: 12,
        split: (4, 2, 2),
        ..PhantomDatasetConfig::default()
    })
    .unwrap();
    data.write(root).unwrap();
}

fn tiny_spec(data: &Path, out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(data, out);
    spec.baselines = vec![SamplingKind::TumorSampled, SamplingKind::SubtypeSampled];
    spec.methods = vec![Method::Gan, Method::Diffusion, Method::Inpaint];
    spec.ratios = vec![0.5, 1.0];
    spec.repetitions = 2;
    spec.base_seed = 11;
    spec.seg = SegConfig {
        encoder_depth: 2,
        base_channels: 4,
        max_channels: 8,
        learning_rate: 1e-3,
        batch_size: 4,
        steps: 12,
        epoch_steps: 6,
        ..SegConfig::default()
    };
    spec.gan = GeneratorSource::trained(GanConfig {
        image_size: 32,
        base_channels: 4,
        max_channels: 8,
        style_dim: 4,
        spade_hidden: 4,
        batch_size: 2,
        steps: 2,
        discriminator_scales: 1,
        ..GanConfig::default()
    });
    spec.autoencoder = GeneratorSource::trained(AutoencoderConfig {
        codebook_size: 8,
        base_channels: 4,
        max_channels: 8,
        batch_size: 2,
        steps: 6,
        warmup_steps: 3,
        ..AutoencoderConfig::default()
    });
    spec.ldm = GeneratorSource::trained(LdmConfig {
        schedule: NoiseSchedule::linear(20, 1e-3, 0.2).unwrap(),
        denoiser: DenoiserConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            groups: 4,
            time_dim: 16,
        },
        learning_rate: 1e-3,
        batch_size: 2,
        steps: 4,
        sample_steps: 4,
        ..LdmConfig::default()
    });
    spec
}

fn ledger_lines(out: &Path) -> usize {
    fs::read_to_string(out.join(LEDGER_FILE)).unwrap().lines().count()
}

#[test]
fn tiny_matrix_runs_resumes_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_phantom(&data);
    let (manifest, items) = load_dataset(&data).unwrap();
    let test_classes: BTreeSet<SubtypeClass> = split_items(&manifest, &items, SplitName::Test)
        .iter()
        .flat_map(|i| i.patch.mask.pixels().iter().filter(|&&c| c > 0).map(|&c| SubtypeClass::from_code(c).unwrap()).collect::<Vec<_>>())
        .collect();
    assert!(SubtypeClass::HER2.iter().all(|c| test_classes.contains(c)), "test split lacks a subtype: {test_classes:?}");

    let out = tmp.path().join("out");
    let spec = tiny_spec(&data, &out);
    let mut harness = Harness::open(spec.clone()).unwrap();
    let real = harness.real_train_len();

    // A file where a run directory belongs makes exactly that run fail.
    let blocked = out.join("runs/baseline-tumor_sampled/rep0");
    fs::create_dir_all(blocked.parent().unwrap()).unwrap();
    fs::write(&blocked, b"").unwrap();

    let first = harness.run_all(false).unwrap();
    assert_eq!(first.failures.len(), 1, "{:?}", first.failures);
    assert_eq!(first.failures[0].label, "baseline:tumor_sampled");
    assert_eq!(first.records.len(), 15);
    let counts = state_counts(&read_latest(&out.join(LEDGER_FILE)).unwrap());
    assert_eq!(counts.get(&RunState::Done), Some(&15));
    assert_eq!(counts.get(&RunState::Failed), Some(&1));

    for r in &first.records {
        let ratio = match r.condition {
            histosynth::harness::Condition::Baseline { .. } => 0.0,
            histosynth::harness::Condition::Mixture { ratio, .. } => ratio,
        };
        assert_eq!(r.train_size.real, real);
        assert_eq!(r.train_size.synthetic, (ratio * real as f64).floor() as usize);
        assert!(r.report.dice.is_finite());
        assert!(r.report.recalls.len() >= 4);
        assert!(out.join(&r.artifacts["segmenter"]).is_file());
    }
    let pool = harness.pool(Method::Diffusion).unwrap();
    assert_eq!(pool.items.len(), real);
    assert!(pool.items.iter().all(|i| i.provenance.method == Method::Diffusion));

    // Resume: only the failed run trains again, finished ones come back as stored.
    fs::remove_file(&blocked).unwrap();
    let record_path = out.join(first.records[0].artifacts["record"].clone());
    let stored = fs::read(&record_path).unwrap();
    let second = harness.run_all(false).unwrap();
    assert!(second.failures.is_empty());
    assert_eq!(second.records.len(), 16);
    assert_eq!(fs::read(&record_path).unwrap(), stored);
    for r in &first.records {
        assert!(second.records.contains(r));
    }
    let lines = ledger_lines(&out);
    let third = harness.run_all(false).unwrap();
    assert_eq!(third.records, second.records);
    assert_eq!(ledger_lines(&out), lines);

    // Report straight from the ledger.
    let records = load_records(&out).unwrap();
    assert_eq!(records.len(), 16);
    let bundle = emit_report(&records, &out.join("report"), None).unwrap();
    assert_eq!(bundle.summary.conditions.len(), 8);
    assert_eq!(bundle.summary.reference.as_deref(), Some("baseline:subtype_sampled"));
    assert_eq!(bundle.summary.comparisons.len(), 7);

    // A fresh output directory retrains the generators and regenerates the
    // pools, and still lands on the same numbers.
    let out2 = tmp.path().join("out2");
    let mut again = Harness::open(tiny_spec(&data, &out2)).unwrap();
    let rerun = again.run_all(false).unwrap();
    assert!(rerun.failures.is_empty());
    for (a, b) in second.records.iter().zip(&rerun.records) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.report, b.report);
    }

    // Forced reruns in place reproduce the metrics too.
    let forced = harness.run_all(true).unwrap();
    for (a, b) in second.records.iter().zip(&forced.records) {
        assert_eq!(a.report, b.report);
    }
}

#[test]
fn open_rejects_a_missing_checkpoint_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&tmp.path().join("nowhere"), &tmp.path().join("out"));
    assert!(Harness::open(spec.clone()).is_err());
    spec.ldm = GeneratorSource::from_checkpoint(tmp.path().join("absent.ckpt"));
    assert!(spec.validate().is_err());
}

#[test]
fn parallel_workers_match_a_single_worker() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_phantom(&data);
    let outcome = |name: &str, workers: usize| {
        let mut spec = tiny_spec(&data, &tmp.path().join(name));
        spec.methods.clear();
        spec.workers = workers;
        Harness::open(spec).unwrap().run_all(false).unwrap()
    };
    let serial = outcome("serial", 1);
    let parallel = outcome("parallel", 3);
    assert_eq!(serial.records.len(), 4);
    for (a, b) in serial.records.iter().zip(&parallel.records) {
        assert_eq!((&a.label, a.rep, &a.report), (&b.label, b.rep, &b.report));
    }
}
