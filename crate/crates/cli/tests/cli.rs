use std::path::Path;
use std::process::Command;

fn histosynth(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_histosynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HISTOSYNTH_DATA_ROOT")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, json: serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(&json).unwrap()).unwrap();
}

#[test]
fn phantom_to_report_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();

    write(
        &tmp.path().join("phantom.json"),
        serde_json::json!({"slides": 8, "patch_size": 32, "stride": 32, "instances_per_slide": 12, "split": [4, 2, 2]}),
    );
    let made = histosynth(&["make-phantom", "--out", &p("data"), "--config", &p("phantom.json")]);
    assert!(made.contains("128 patches from 8 slides"), "{made}");

    let seg = serde_json::json!({
        "encoder_depth": 2, "base_channels": 4, "max_channels": 8,
        "learning_rate": 1e-3, "batch_size": 4, "steps": 6, "epoch_steps": 3
    });
    write(&tmp.path().join("seg.json"), seg.clone());
    histosynth(&["train-seg", "--data", &p("data"), "--out", &p("seg.ckpt"), "--config", &p("seg.json")]);
    let report = histosynth(&["evaluate", "--checkpoint", &p("seg.ckpt"), "--data", &p("data")]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["dice"].as_f64().unwrap().is_finite());

    let image = std::fs::read_dir(tmp.path().join("data/patches")).unwrap().next().unwrap().unwrap().path().join("image.png");
    histosynth(&["predict", "--checkpoint", &p("seg.ckpt"), "--image", image.to_str().unwrap(), "--out", &p("pred.png")]);
    assert!(tmp.path().join("pred.png").is_file());

    write(
        &tmp.path().join("spec.json"),
        serde_json::json!({
            "dataset_root": p("data"), "output_dir": p("exp"),
            "baselines": ["tumor_sampled", "subtype_sampled"], "repetitions": 2, "seg": seg
        }),
    );
    let run = histosynth(&["experiment", "run", "--spec", &p("spec.json")]);
    assert!(run.contains("4 runs done, 0 failed"), "{run}");
    let status = histosynth(&["experiment", "status", "--spec", &p("spec.json")]);
    assert_eq!(status.lines().filter(|l| l.ends_with("  done")).count(), 4, "{status}");
    assert!(status.contains("ledger: 4 done"), "{status}");
    let summary = histosynth(&["report", "--runs", &p("exp")]);
    assert!(summary.contains("baseline:subtype_sampled"), "{summary}");
    for f in ["summary.json", "summary.txt", "boxplots.svg", "confusion_rows.svg"] {
        assert!(tmp.path().join("exp/report").join(f).is_file(), "{f}");
    }
}
