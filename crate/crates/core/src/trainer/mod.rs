//! Minibatch training with seeded shuffling and augmentation, periodic
//! validation, atomic checkpoints and overfit probes.

mod loader;
mod metrics;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loader::{build_batch, ordered_pipeline, Batch, QUEUE_BATCHES};
pub use metrics::{evaluate_records, EvalSummary, MetricsSnapshot, STEER_TOLERANCE_DEG};

use crate::autodiff::{pack_u64, read_checkpoint, unpack_u64, write_checkpoint, Optimizer, OptimizerConfig};
use crate::dataset::{AugmentationPolicy, Dataset, DrivingRecord, Split};
use crate::error::{Error, Result};
use crate::model::{DrivingModel, ModelBundle, ModelConfig, ModelMode};
use crate::seed::{derive_seed, rng_for};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Human-readable copy of the model config that is also embedded in every checkpoint.
pub const CONFIG_SIDECAR: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
/// Batch size for validation and evaluation passes.
pub const EVAL_BATCH: usize = 64;
/// Overfit probes check for a perfect fit at least this often.
pub const OVERFIT_CHECK_EVERY: usize = 20;

const STATE_TENSOR: &str = "train.state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
    /// Steps between validation passes.
    pub validate_every: usize,
    /// Steps between checkpoints.
    pub checkpoint_every: usize,
    /// Periodic checkpoints retained on disk, besides the best one.
    pub keep_checkpoints: usize,
    /// Train on the first N training records only, without augmentation,
    /// until both heads fit them perfectly or `overfit_max_steps` pass.
    pub overfit_n: Option<usize>,
    pub overfit_max_steps: usize,
    /// Hard cap on optimizer steps, for smoke runs.
    pub max_steps: Option<usize>,
    /// Threads preparing batches; 0 or 1 prepares them on the training thread.
    pub loader_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationPolicy::default(),
            seed: 7,
            validate_every: 200,
            checkpoint_every: 200,
            keep_checkpoints: 3,
            overfit_n: None,
            overfit_max_steps: 2000,
            max_steps: None,
            loader_threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail(format!("epochs ({}) and batch_size ({}) must be at least 1", self.epochs, self.batch_size));
        }
        if self.validate_every == 0 || self.checkpoint_every == 0 {
            return fail("validate_every and checkpoint_every must be at least 1".into());
        }
        if self.overfit_n == Some(0) || self.overfit_max_steps == 0 || self.max_steps == Some(0) {
            return fail("overfit_n, overfit_max_steps and max_steps must be at least 1".into());
        }
        self.optimizer.validate()?;
        self.augmentation.validate()
    }

    fn is_overfit(&self) -> bool {
        self.overfit_n.is_some()
    }
}

/// Result of an overfit probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitOutcome {
    pub records: usize,
    pub steps: usize,
    /// First check at which every record was classified correctly by both heads.
    pub perfect_at_step: Option<usize>,
    /// Eval-mode metrics on the probe records after the last step.
    pub final_eval: EvalSummary,
    /// Mean training loss over the last tenth of the steps.
    pub plateau_loss: f64,
    /// `plateau_loss` in rescaled-target units, comparable across regression scalings.
    pub plateau_loss_rescaled: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<MetricsSnapshot>,
    /// Training loss of every step run by this call.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_val_loss: f64,
    pub overfit: Option<OverfitOutcome>,
    pub bundle: ModelBundle,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from a checkpoint written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Called with every snapshot after it is written to `metrics.jsonl`.
    pub on_metrics: Option<&'a mut dyn FnMut(&MetricsSnapshot)>,
}

/// Everything besides the model and optimizer needed to continue a run.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Progress {
    step: usize,
    epoch: usize,
    /// Next batch within `epoch`.
    batch: usize,
    loss_sum: f64,
    loss_count: usize,
    best_val: f64,
    seed: u64,
    batch_size: usize,
    overfit_n: Option<usize>,
}

impl Progress {
    fn fresh(config: &TrainConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch: 0,
            loss_sum: 0.0,
            loss_count: 0,
            best_val: f64::INFINITY,
            seed: config.seed,
            batch_size: config.batch_size,
            overfit_n: config.overfit_n,
        }
    }

    fn words(&self) -> Vec<u64> {
        vec![
            self.step as u64,
            self.epoch as u64,
            self.batch as u64,
            self.loss_sum.to_bits(),
            self.loss_count as u64,
            self.best_val.to_bits(),
            self.seed,
            self.batch_size as u64,
            self.overfit_n.map_or(u64::MAX, |n| n as u64),
        ]
    }

    fn from_words(w: &[u64]) -> Result<Self> {
        let [step, epoch, batch, loss_sum, loss_count, best_val, seed, batch_size, overfit_n] = w[..] else {
            return Err(Error::Checkpoint(format!("training state has {} words, expected 9", w.len())));
        };
        Ok(Self {
            step: step as usize,
            epoch: epoch as usize,
            batch: batch as usize,
            loss_sum: f64::from_bits(loss_sum),
            loss_count: loss_count as usize,
            best_val: f64::from_bits(best_val),
            seed,
            batch_size: batch_size as usize,
            overfit_n: (overfit_n != u64::MAX).then_some(overfit_n as usize),
        })
    }
}

fn check_geometry(config: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if (config.input_width, config.input_height) != (m.frame_width, m.frame_height) {
        return Err(Error::Mismatch(format!(
            "model input is {}x{} but the dataset holds {}x{} frames",
            config.input_width, config.input_height, m.frame_width, m.frame_height
        )));
    }
    Ok(())
}

/// Shuffled record order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &format!("shuffle/{epoch}")));
    order
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:08}.ckpt")
}

/// Periodic checkpoints in `dir`, oldest first.
fn periodic_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
        })
        .collect();
    out.sort();
    Ok(out)
}

struct Run<'a> {
    out_dir: PathBuf,
    keep_checkpoints: usize,
    bundle: ModelBundle,
    optimizer: Optimizer,
    progress: Progress,
    metrics: File,
    history: Vec<MetricsSnapshot>,
    step_losses: Vec<f64>,
    on_metrics: Option<&'a mut dyn FnMut(&MetricsSnapshot)>,
    last_checkpoint: Option<PathBuf>,
}

impl Run<'_> {
    fn save(&mut self, path: &Path) -> Result<()> {
        let mut extra = self.optimizer.state_tensors();
        extra.push((STATE_TENSOR.to_string(), pack_u64(&self.progress.words())));
        write_checkpoint(path, &self.bundle.to_checkpoint(extra))
    }

    fn periodic_checkpoint(&mut self) -> Result<()> {
        let dir = self.out_dir.join(CHECKPOINT_DIR);
        let path = dir.join(checkpoint_name(self.progress.step));
        self.save(&path)?;
        let existing = periodic_checkpoints(&dir)?;
        let excess = existing.len().saturating_sub(self.keep_checkpoints.max(1));
        for old in &existing[..excess] {
            std::fs::remove_file(old).map_err(|e| Error::io(old, e))?;
        }
        self.last_checkpoint = Some(path);
        Ok(())
    }

    /// Evaluates, records a snapshot and refreshes the best checkpoint.
    fn snapshot(&mut self, epoch: usize, eval_records: &[DrivingRecord]) -> Result<EvalSummary> {
        let eval = evaluate_records(&self.bundle.model, eval_records, &self.bundle.normalization, EVAL_BATCH)?;
        let p = &mut self.progress;
        let train_loss = (p.loss_count > 0).then(|| p.loss_sum / p.loss_count as f64);
        p.loss_sum = 0.0;
        p.loss_count = 0;
        let snap = MetricsSnapshot::from_eval(p.step, epoch, train_loss, &eval);
        writeln!(self.metrics, "{}", snap.to_json_line()).map_err(|e| Error::io(self.out_dir.join(METRICS_FILE), e))?;
        self.metrics.flush().map_err(|e| Error::io(self.out_dir.join(METRICS_FILE), e))?;
        if let Some(f) = self.on_metrics.as_mut() {
            f(&snap);
        }
        self.history.push(snap);
        if eval.loss < self.progress.best_val {
            self.progress.best_val = eval.loss;
            self.save(&self.out_dir.join(BEST_CHECKPOINT))?;
        }
        Ok(eval)
    }
}

/// Trains a model on `dataset` and writes metrics and checkpoints under `out_dir`.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: impl AsRef<Path>,
    options: TrainOptions<'_>,
) -> Result<TrainReport> {
    let out_dir = out_dir.as_ref();
    model_config.validate()?;
    config.validate()?;
    check_geometry(model_config, dataset)?;
    let train_split = dataset.split(Split::Train);
    let (records, eval_records, policy) = match config.overfit_n {
        Some(n) => {
            if n > train_split.len() {
                return Err(Error::Config(format!("overfit_n {n} exceeds the {} training records", train_split.len())));
            }
            (&train_split[..n], &train_split[..n], AugmentationPolicy::disabled())
        }
        None => (train_split, dataset.split(Split::Val), config.augmentation),
    };
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if eval_records.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }

    std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    model_config.save(out_dir.join(CONFIG_SIDECAR))?;
    let train_json = serde_json::to_string_pretty(config).expect("config serializes") + "\n";
    let train_cfg_path = out_dir.join(TRAIN_CONFIG_FILE);
    std::fs::write(&train_cfg_path, train_json).map_err(|e| Error::io(&train_cfg_path, e))?;

    let mut model = DrivingModel::new(model_config.clone(), derive_seed(config.seed, "model/init"))?;
    let mut optimizer = Optimizer::new(config.optimizer, &model.param_sizes());
    let mut progress = Progress::fresh(config);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut history = Vec::new();
    let mut norm = dataset.manifest.normalization;
    if let Some(path) = &options.resume {
        let ckpt = read_checkpoint(path)?;
        let bundle = ModelBundle::from_checkpoint(&ckpt)?;
        check_geometry(bundle.model.config(), dataset)?;
        if bundle.model.config() != model_config {
            return Err(Error::Mismatch(format!("{} was trained with a different model config", path.display())));
        }
        model = bundle.model;
        // A resumed run keeps the normalization it started with.
        norm = bundle.normalization;
        optimizer.load_state(&|n| ckpt.get(n).cloned())?;
        let state = ckpt.get(STATE_TENSOR).ok_or_else(|| Error::Checkpoint(format!("{STATE_TENSOR} missing")))?;
        progress = Progress::from_words(&unpack_u64(state)?)?;
        if (progress.seed, progress.batch_size, progress.overfit_n) != (config.seed, config.batch_size, config.overfit_n) {
            return Err(Error::Mismatch("seed, batch_size or overfit_n differ from the resumed run".into()));
        }
        if metrics_path.exists() {
            let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let snap: MetricsSnapshot = serde_json::from_str(line).map_err(|e| Error::json(&metrics_path, e))?;
                if snap.step <= progress.step {
                    history.push(snap);
                }
            }
        }
    }
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    for snap in &history {
        writeln!(metrics, "{}", snap.to_json_line()).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let steps_per_epoch = records.len().div_ceil(config.batch_size);
    let mut budget = if config.is_overfit() { config.overfit_max_steps } else { config.epochs * steps_per_epoch };
    if let Some(cap) = config.max_steps {
        budget = budget.min(cap);
    }
    let check_every = if config.is_overfit() { config.validate_every.min(OVERFIT_CHECK_EVERY) } else { config.validate_every };
    let mut run = Run {
        out_dir: out_dir.to_path_buf(),
        keep_checkpoints: config.keep_checkpoints,
        bundle: ModelBundle::new(model, norm),
        optimizer,
        progress,
        metrics,
        history,
        step_losses: Vec::new(),
        on_metrics: options.on_metrics,
        last_checkpoint: None,
    };
    let mut perfect_at_step = None;
    let mut last_eval = None;

    while run.progress.step < budget && perfect_at_step.is_none() {
        let epoch = run.progress.epoch;
        let order = epoch_order(records.len(), config.seed, epoch);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let start = run.progress.batch;
        let cfg = run.bundle.model.config().clone();
        let norm = run.bundle.normalization;
        ordered_pipeline(
            batches.len() - start,
            config.loader_threads,
            |k| {
                let b = start + k;
                build_batch(records, batches[b], &policy, derive_seed(config.seed, &format!("augment/{epoch}/{b}")), &norm, &cfg)
            },
            |k, batch| {
                let (loss, grads) = run.bundle.model.train_step(&batch.frames, &batch.velocity_mph, &batch.targets)?;
                run.optimizer.step(run.bundle.model.params_mut(), &grads)?;
                let p = &mut run.progress;
                p.step += 1;
                p.batch = start + k + 1;
                if p.batch == batches.len() {
                    p.epoch += 1;
                    p.batch = 0;
                }
                p.loss_sum += loss;
                p.loss_count += 1;
                run.step_losses.push(loss);
                let step = p.step;
                let done = step >= budget;
                if step % check_every == 0 || done {
                    let eval = run.snapshot(epoch + 1, eval_records)?;
                    let perfect = eval.accel_accuracy == 1.0 && eval.steering_accuracy == 1.0;
                    if config.is_overfit() && model_config.mode == ModelMode::Classification && perfect {
                        perfect_at_step = Some(step);
                    }
                    last_eval = Some(eval);
                }
                if step % config.checkpoint_every == 0 || done || perfect_at_step.is_some() {
                    run.periodic_checkpoint()?;
                }
                Ok(if done || perfect_at_step.is_some() { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
            },
        )?;
    }
    if run.last_checkpoint.is_none() {
        // Resumed at or past the budget: still leave a final checkpoint.
        let epoch = run.progress.epoch.max(1);
        last_eval = Some(run.snapshot(epoch, eval_records)?);
        run.periodic_checkpoint()?;
    }

    let overfit = config.overfit_n.map(|n| {
        let losses = &run.step_losses;
        let tail = (losses.len() / 10).max(1).min(losses.len());
        let plateau_loss =
            if tail == 0 { f64::NAN } else { losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64 };
        let factor = match model_config.mode {
            ModelMode::Regression => model_config.regression_targets.squared_error_to_rescaled(),
            ModelMode::Classification => 1.0,
        };
        OverfitOutcome {
            records: n,
            steps: run.progress.step,
            perfect_at_step,
            final_eval: last_eval.clone().expect("at least one evaluation ran"),
            plateau_loss,
            plateau_loss_rescaled: plateau_loss * factor,
        }
    });
    Ok(TrainReport {
        history: run.history,
        step_losses: run.step_losses,
        steps: run.progress.step,
        final_checkpoint: run.last_checkpoint.expect("final checkpoint written"),
        best_checkpoint: out_dir.join(BEST_CHECKPOINT),
        best_val_loss: run.progress.best_val,
        overfit,
        bundle: run.bundle,
    })
}

/// Eval-mode metrics of a checkpoint on one split, with the normalization
/// stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub snapshot: MetricsSnapshot,
    pub summary: EvalSummary,
}

pub fn evaluate(checkpoint: impl AsRef<Path>, dataset: &Dataset, split: Split) -> Result<Evaluation> {
    let ckpt = read_checkpoint(checkpoint)?;
    let bundle = ModelBundle::from_checkpoint(&ckpt)?;
    check_geometry(bundle.model.config(), dataset)?;
    let records = dataset.split(split);
    let summary = evaluate_records(&bundle.model, records, &bundle.normalization, EVAL_BATCH)?;
    let (step, epoch) = match ckpt.get(STATE_TENSOR) {
        Some(t) => {
            let p = Progress::from_words(&unpack_u64(t)?)?;
            (p.step, p.epoch)
        }
        None => (0, 0),
    };
    let snapshot = MetricsSnapshot::from_eval(step, epoch, None, &summary);
    Ok(Evaluation { split, snapshot, summary })
}
