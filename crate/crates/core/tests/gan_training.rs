use histosynth::data::{generate_phantom_dataset, PhantomDatasetConfig};
use histosynth::gan::{gan_generate, train_gan, GanConfig, StyleVector};
use histosynth::staining::mean_dab;
use histosynth::{SubtypeClass, SubtypeMask};

fn desk_config(steps: u64) -> GanConfig {
    GanConfig {
        learning_rate: 2e-4,
        batch_size: 4,
        steps,
        ..GanConfig::default()
    }
}

#[test]
fn two_hundred_steps_reduce_generator_loss() {
    let data = generate_phantom_dataset(&PhantomDatasetConfig {
        slides: 4,
        split: (2, 1, 1),
        ..PhantomDatasetConfig::default()
    })
    .unwrap();
    let patches: Vec<_> = data.patches.into_iter().take(16).collect();
    assert_eq!(patches.len(), 16);
    let start = std::time::Instant::now();
    let trainer = train_gan::<f32>(&patches, desk_config(200), 0).unwrap();
    eprintln!("200 GAN steps took {:.1?}", start.elapsed());
    let h = &trainer.history;
    assert_eq!(h.len(), 200);
    for l in h {
        for v in [l.discriminator, l.adversarial, l.feature_matching, l.kl, l.generator] {
            assert!(v.is_finite(), "step {}: {l:?}", l.step);
        }
    }
    let window = |r: std::ops::Range<usize>| h[r.clone()].iter().map(|l| l.generator).sum::<f64>() / r.len() as f64;
    let (first, last) = (window(0..50), window(150..200));
    eprintln!("generator loss window means: {first:.4} -> {last:.4}");
    assert!(last < first);

    let all = |c: SubtypeClass| SubtypeMask::filled(64, 64, c.code());
    let style = StyleVector::from_seed(3, trainer.gan.config.style_dim);
    let hi = gan_generate(&trainer.gan, &all(SubtypeClass::Her2Three), &style).unwrap();
    let lo = gan_generate(&trainer.gan, &all(SubtypeClass::Her2Zero), &style).unwrap();
    let (d_hi, d_lo) = (mean_dab(&hi, |_, _| true).unwrap(), mean_dab(&lo, |_, _| true).unwrap());
    eprintln!("mean dab her2_3 {d_hi:.1} vs her2_0 {d_lo:.1}");
}
