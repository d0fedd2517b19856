//! Harness-level integration tests: checkpoint round-trips during training,
//! best-checkpoint reload exactness, resume, and the smoothed-loss descent
//! invariant. Short runs; the full-length criteria live in `acceptance.rs`.

mod common;

use common::*;
use sacnet_core::checkpoint;
use sacnet_core::model::SacNetModel;
use sacnet_core::tensor::NumericMode;
use sacnet_core::train::{evaluate, run_training};

/// Reloading the best checkpoint reproduces the logged best mean DSC
/// exactly. Runs in f32 training mode, where the f32 checkpoint payload is
/// the native parameter width.
#[test]
fn best_checkpoint_reload_reproduces_logged_mdsc() {
    let run = toy_run("trainer-f32-12ep", 7, 32.0, NumericMode::F32, 12);
    let ckpt = checkpoint::load(&run.out_dir.join("best.ckpt")).unwrap();
    let cfg = ckpt.model_config().unwrap();
    let mut model = SacNetModel::<f32>::new(cfg, 999).unwrap();
    ckpt.restore_params(&mut model.store).unwrap();

    // same validation split as the harness: last 20% of the dataset
    let (samples, meta) = sacnet_core::data::load_dataset(&toy_dataset_dir()).unwrap();
    let n_train = (samples.len() as f64 * 0.8).floor() as usize;
    let report = evaluate(&model, &samples[n_train..], meta.classes).unwrap();
    assert_eq!(
        report.mean_dsc.to_bits(),
        run.report.best_mean_dsc.to_bits(),
        "reloaded best checkpoint must reproduce the logged best mDSC exactly"
    );
}

/// Save -> load -> save of a mid-training checkpoint is byte-identical.
#[test]
fn training_checkpoint_files_roundtrip_byte_identically() {
    let run = toy_run("trainer-f32-12ep", 7, 32.0, NumericMode::F32, 12);
    for name in ["best.ckpt", "last.ckpt"] {
        let path = run.out_dir.join(name);
        let original = std::fs::read(&path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let copy = run.out_dir.join(format!("{name}.copy"));
        checkpoint::save(&copy, &loaded).unwrap();
        assert_eq!(original, std::fs::read(&copy).unwrap(), "{name} not byte-stable");
    }
}

/// Resuming from the last checkpoint continues the epoch counter and
/// completes; resuming against a different architecture is rejected.
#[test]
fn resume_continues_and_rejects_config_mismatch() {
    let first = toy_config(19, 32.0, NumericMode::F32, 4, "trainer-resume-a");
    run_training(&first, None).unwrap();
    let last = first.out_dir.join("last.ckpt");

    let mut extended = first.clone();
    extended.epochs = 6;
    let report = run_training(&extended, Some(&last)).unwrap();
    assert_eq!(report.epochs, 6);
    let csv = std::fs::read_to_string(first.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6, "4 initial + 2 resumed epochs");

    let mut wrong = extended.clone();
    wrong.model.groups = 1;
    let err = run_training(&wrong, Some(&last)).unwrap_err();
    assert!(matches!(err, sacnet_core::SacError::DigestMismatch));
}

/// The 5-epoch smoothed train loss decreases over the first 30 toy epochs.
#[test]
fn smoothed_train_loss_descends_over_first_30_epochs() {
    let run = toy_run("c7-seed42-f64", 42, 32.0, NumericMode::F64, 60);
    let (header, rows) = parse_csv(&run.metrics_csv);
    let loss_col = col(&header, "train_loss");
    let losses: Vec<f64> = rows.iter().take(30).map(|r| r[loss_col]).collect();
    let smoothed: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, pair) in smoothed.windows(2).enumerate() {
        assert!(
            pair[1] < pair[0],
            "smoothed loss rose at window {i}: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}
