mod common;

use std::fs;

use common::fixtures::{dataset, small_model};
use ignition::dataset::{label_stats, Split};
use ignition::model::{ModelBundle, ModelMode};
use ignition::trainer::{
    evaluate, train, MetricsSnapshot, TrainConfig, TrainOptions, BEST_CHECKPOINT, CHECKPOINT_DIR, CONFIG_SIDECAR,
    METRICS_FILE,
};
use ignition::Error;

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 16, seed, validate_every: 4, checkpoint_every: 3, ..Default::default() }
}

fn metrics_lines(dir: &std::path::Path) -> Vec<MetricsSnapshot> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn one_epoch_takes_ceil_n_over_b_steps_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 20.0, 3);
    let n = data.split(Split::Train).len();
    let out = tmp.path().join("run");
    let report = train(&data, &small_model(ModelMode::Classification), &quick(1), &out, TrainOptions::default()).unwrap();
    assert_eq!(report.steps, n.div_ceil(16));
    assert_eq!(report.step_losses.len(), report.steps);
    let lines = metrics_lines(&out);
    assert_eq!(lines, report.history);
    // A snapshot every 4 steps plus one at the end.
    assert_eq!(lines.len(), report.steps.div_ceil(4));
    assert_eq!(lines.last().unwrap().step, report.steps);
    for s in &lines {
        assert!((0.0..=1.0).contains(&s.accel_accuracy));
        assert!(s.steering_within_20deg >= s.steering_accuracy);
    }
    assert!(out.join(BEST_CHECKPOINT).exists());
    assert!(out.join(CONFIG_SIDECAR).exists());
    let kept = fs::read_dir(out.join(CHECKPOINT_DIR)).unwrap().count();
    assert!(kept <= 3, "{kept} periodic checkpoints kept");
    assert!(report.final_checkpoint.exists());
}

#[test]
fn equal_seeds_give_identical_histories_regardless_of_loader_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 15.0, 4);
    let cfg = small_model(ModelMode::Classification);
    let a = train(&data, &cfg, &quick(9), tmp.path().join("a"), TrainOptions::default()).unwrap();
    let b = train(&data, &cfg, &quick(9), tmp.path().join("b"), TrainOptions::default()).unwrap();
    let threaded = TrainConfig { loader_threads: 3, ..quick(9) };
    let c = train(&data, &cfg, &threaded, tmp.path().join("c"), TrainOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.step_losses, c.step_losses);
    assert_eq!(
        fs::read(tmp.path().join("a").join(METRICS_FILE)).unwrap(),
        fs::read(tmp.path().join("c").join(METRICS_FILE)).unwrap()
    );
    let d = train(&data, &cfg, &quick(10), tmp.path().join("d"), TrainOptions::default()).unwrap();
    assert_ne!(a.step_losses, d.step_losses);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 15.0, 5);
    let cfg = small_model(ModelMode::Classification);
    let full_cfg = TrainConfig { epochs: 2, ..quick(2) };
    let full = train(&data, &cfg, &full_cfg, tmp.path().join("full"), TrainOptions::default()).unwrap();

    // Stop on a validation step so the interrupted run logs no extra snapshot.
    let part_dir = tmp.path().join("part");
    let stopped = train(&data, &cfg, &TrainConfig { max_steps: Some(8), ..full_cfg.clone() }, &part_dir, TrainOptions::default())
        .unwrap();
    assert_eq!(stopped.steps, 8);
    let resumed = train(
        &data,
        &cfg,
        &full_cfg,
        &part_dir,
        TrainOptions { resume: Some(part_dir.join(CHECKPOINT_DIR).join("step_00000008.ckpt")), ..Default::default() },
    )
    .unwrap();
    assert_eq!(resumed.steps, full.steps);
    assert_eq!(&full.step_losses[8..], &resumed.step_losses[..]);
    assert_eq!(metrics_lines(&part_dir), full.history);
    assert_eq!(resumed.bundle.model.named_tensors(), full.bundle.model.named_tensors());
}

#[test]
fn resume_rejects_mismatched_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 10.0, 6);
    let cfg = small_model(ModelMode::Classification);
    let run = tmp.path().join("r");
    train(&data, &cfg, &TrainConfig { max_steps: Some(1), ..quick(1) }, &run, TrainOptions::default()).unwrap();
    let wide = ignition::model::ModelConfig { input_width: 160, input_height: 90, ..cfg.clone() };
    let err = train(&data, &wide, &quick(1), tmp.path().join("r2"), TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)), "{err}");
    let other = ignition::model::ModelConfig { hidden_units: 16, ..cfg };
    let err = train(&data, &other, &quick(1), &run, TrainOptions { resume: Some(run.join(BEST_CHECKPOINT)), ..Default::default() })
        .unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_metrics_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 15.0, 8);
    let run = tmp.path().join("r");
    let report = train(&data, &small_model(ModelMode::Classification), &quick(3), &run, TrainOptions::default()).unwrap();
    let a = evaluate(&report.final_checkpoint, &data, Split::Val).unwrap();
    let b = evaluate(&report.final_checkpoint, &data, Split::Val).unwrap();
    assert_eq!(a, b);
    let last = report.history.last().unwrap();
    assert_eq!(a.snapshot.val_loss, last.val_loss);
    assert_eq!(a.snapshot.accel_accuracy, last.accel_accuracy);
    assert_eq!(a.snapshot.steering_within_20deg, last.steering_within_20deg);
    let reloaded = ModelBundle::load(&report.final_checkpoint).unwrap();
    assert_eq!(reloaded.model.named_tensors(), report.bundle.model.named_tensors());
}

#[test]
fn untrained_accel_accuracy_is_near_the_majority_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "road_course", 40.0, 9);
    let run = tmp.path().join("r");
    // One step leaves the heads almost at their zero initialization.
    let cfg = TrainConfig { max_steps: Some(1), optimizer: ignition::autodiff::OptimizerConfig::Sgd(ignition::autodiff::SgdConfig { lr: 1e-6, momentum: 0.0 }), ..quick(1) };
    let report = train(&data, &small_model(ModelMode::Classification), &cfg, &run, TrainOptions::default()).unwrap();
    let eval = evaluate(&report.final_checkpoint, &data, Split::Test).unwrap();
    let priors = label_stats(data.split(Split::Test)).unwrap().accel_class_priors;
    let max_prior = priors.iter().cloned().fold(0.0, f64::max);
    assert!((eval.summary.accel_accuracy - max_prior).abs() <= 0.1, "{} vs {priors:?}", eval.summary.accel_accuracy);
}

#[test]
fn bridge_sink_sees_every_snapshot_without_changing_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "oval", 10.0, 2);
    let cfg = small_model(ModelMode::Classification);
    let plain = train(&data, &cfg, &quick(4), tmp.path().join("a"), TrainOptions::default()).unwrap();
    let mut seen = Vec::new();
    let mut sink = |s: &MetricsSnapshot| seen.push(s.clone());
    let observed =
        train(&data, &cfg, &quick(4), tmp.path().join("b"), TrainOptions { on_metrics: Some(&mut sink), ..Default::default() })
            .unwrap();
    assert_eq!(seen, observed.history);
    assert_eq!(plain.history, observed.history);
}

#[test]
fn overfit_probe_on_small_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), "road_course", 15.0, 11);
    let cfg = TrainConfig { overfit_n: Some(25), batch_size: 25, overfit_max_steps: 400, ..quick(5) };
    let report = train(&data, &small_model(ModelMode::Classification), &cfg, tmp.path().join("o"), TrainOptions::default()).unwrap();
    let outcome = report.overfit.unwrap();
    assert_eq!(outcome.records, 25);
    let at = outcome.perfect_at_step.expect("25 records fit perfectly");
    assert_eq!(outcome.steps, at);
    assert_eq!(outcome.final_eval.accel_accuracy, 1.0);
    assert_eq!(outcome.final_eval.steering_accuracy, 1.0);
}
