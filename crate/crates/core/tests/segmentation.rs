use histosynth::data::{generate_phantom_dataset, LabeledPatch, PhantomDatasetConfig};
use histosynth::eval::{evaluate_segmenter, EvalConfig};
use histosynth::segmentation::{predict_mask, score_patches, train_segmenter, SegConfig, SegRun};

fn phantom() -> Vec<LabeledPatch> {
    generate_phantom_dataset(&PhantomDatasetConfig {
        slides: 2,
        slide_size: 128,
        patch_size: 32,
        stride: 32,
        instances_per_slide: 16,
        split: (1, 1, 0),
        ..PhantomDatasetConfig::default()
    })
    .unwrap()
    .patches
}

fn small(steps: u64) -> SegConfig {
    SegConfig {
        encoder_depth: 2,
        base_channels: 4,
        max_channels: 8,
        learning_rate: 1e-3,
        batch_size: 4,
        steps,
        epoch_steps: 10,
        ..SegConfig::default()
    }
}

#[test]
fn trained_segmenter_round_trips_through_a_checkpoint() {
    let patches = phantom();
    let (train, val) = patches.split_at(patches.len() / 2);
    let run = train_segmenter::<f32>(train, val, small(30), 4).unwrap();
    assert_eq!(run.history.len(), 3);
    let best = run.history.iter().map(|r| r.val_dice).fold(f64::MIN, f64::max);
    assert_eq!(run.history[run.best_epoch].val_dice, best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    run.save(&path).unwrap();
    let back = SegRun::<f32>::load(&path).unwrap();
    assert_eq!(back.best_epoch, run.best_epoch);
    assert_eq!(back.history, run.history);
    for p in &val[..4] {
        let a = predict_mask(&run.model, &p.image).unwrap();
        assert_eq!(a, predict_mask(&back.model, &p.image).unwrap());
        assert!(a.binary.pixels().iter().all(|&v| v <= 1));
    }

    let report = evaluate_segmenter(&back.model, &patches, EvalConfig::default()).unwrap();
    assert!((0.0..=1.0).contains(&report.dice));
    assert_eq!(report.subtype_variance, report.recomputed_variance().unwrap());
    let score = score_patches(&back.model, val).unwrap();
    assert_eq!(score.dice, run.history[run.best_epoch].val_dice);
}

#[test]
fn same_seed_same_model() {
    let patches = phantom();
    let a = train_segmenter::<f32>(&patches[..8], &patches[8..12], small(10), 9).unwrap();
    let b = train_segmenter::<f32>(&patches[..8], &patches[8..12], small(10), 9).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn encoder_can_start_from_an_earlier_checkpoint() {
    let patches = phantom();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    train_segmenter::<f32>(&patches[..8], &[], small(10), 1).unwrap().save(&path).unwrap();

    let mut config = small(0);
    config.use_pretrained_encoder = true;
    config.pretrained_encoder = Some(path);
    let warm = train_segmenter::<f32>(&patches[..8], &[], config.clone(), 2).unwrap();
    config.use_pretrained_encoder = false;
    config.pretrained_encoder = None;
    let cold = train_segmenter::<f32>(&patches[..8], &[], config, 2).unwrap();
    assert_ne!(warm.model.params, cold.model.params);

    let mut broken = small(0);
    broken.use_pretrained_encoder = true;
    broken.pretrained_encoder = Some(dir.path().join("absent.ckpt"));
    assert!(train_segmenter::<f32>(&patches[..8], &[], broken, 2).is_err());
}
