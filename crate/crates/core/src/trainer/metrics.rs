use serde::{Deserialize, Serialize};

use super::loader::build_batch;
use crate::dataset::{AugmentationPolicy, DrivingRecord, Normalization};
use crate::error::{Error, Result};
use crate::model::{encode_targets, steering_bucket, AccelClass, DrivingModel, ModelConfig, Predictions, TargetEncoding};

/// Steering predictions this close to the label count as correct in the
/// tolerance-based accuracy.
pub const STEER_TOLERANCE_DEG: f64 = 20.0;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous snapshot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub accel_accuracy: f64,
    pub steering_accuracy: f64,
    pub steering_within_20deg: f64,
}

impl MetricsSnapshot {
    pub fn from_eval(step: usize, epoch: usize, train_loss: Option<f64>, eval: &EvalSummary) -> Self {
        Self {
            step,
            epoch,
            train_loss,
            val_loss: Some(eval.loss),
            accel_accuracy: eval.accel_accuracy,
            steering_accuracy: eval.steering_accuracy,
            steering_within_20deg: eval.steering_within_20deg,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}

/// Eval-mode metrics over a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub loss: f64,
    pub accel_accuracy: f64,
    pub steering_accuracy: f64,
    pub steering_within_20deg: f64,
    /// Rows are true classes, columns predicted, in THROTTLE, BRAKE, NEUTRAL order.
    pub accel_confusion: [[usize; 3]; 3],
}

#[derive(Debug, Default)]
pub(crate) struct Tally {
    count: usize,
    loss_sum: f64,
    accel_hits: usize,
    bucket_hits: usize,
    within: usize,
    confusion: [[usize; 3]; 3],
}

impl Tally {
    pub(crate) fn add(&mut self, model: &DrivingModel, preds: &Predictions, records: &[&DrivingRecord], batch_loss: f64) {
        let scale = model.config().regression_targets;
        self.loss_sum += batch_loss * records.len() as f64;
        for (i, r) in records.iter().enumerate() {
            let pred = preds.decode(i, scale);
            let p_acc = AccelClass::from_pedals(pred.throttle, pred.brake);
            let t_acc = AccelClass::from_pedals(r.label.throttle, r.label.brake);
            self.confusion[t_acc.index()][p_acc.index()] += 1;
            self.accel_hits += (p_acc == t_acc) as usize;
            self.bucket_hits += (steering_bucket(pred.steer_deg) == steering_bucket(r.label.steer_deg)) as usize;
            self.within += ((pred.steer_deg - r.label.steer_deg).abs() <= STEER_TOLERANCE_DEG) as usize;
        }
        self.count += records.len();
    }

    pub(crate) fn summary(&self) -> Result<EvalSummary> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = self.count as f64;
        Ok(EvalSummary {
            count: self.count,
            loss: self.loss_sum / n,
            accel_accuracy: self.accel_hits as f64 / n,
            steering_accuracy: self.bucket_hits as f64 / n,
            steering_within_20deg: self.within as f64 / n,
            accel_confusion: self.confusion,
        })
    }
}

/// Eval-mode pass over `records` with running batchnorm statistics and no
/// augmentation.
pub fn evaluate_records(
    model: &DrivingModel,
    records: &[DrivingRecord],
    norm: &Normalization,
    batch_size: usize,
) -> Result<EvalSummary> {
    let cfg = model.config();
    let policy = AugmentationPolicy::disabled();
    let mut tally = Tally::default();
    let indices: Vec<usize> = (0..records.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = build_batch(records, chunk, &policy, 0, norm, cfg)?;
        let (loss, preds) = model.eval_loss(&batch.frames, &batch.velocity_mph, &batch.targets)?;
        if !preds.all_finite() {
            return Err(Error::NonFiniteOutput);
        }
        let refs: Vec<&DrivingRecord> = chunk.iter().map(|&i| &records[i]).collect();
        tally.add(model, &preds, &refs, loss);
    }
    tally.summary()
}

/// Per-record targets in the model's encoding.
pub(crate) fn targets_for(cfg: &ModelConfig, records: &[&DrivingRecord]) -> Vec<TargetEncoding> {
    records.iter().map(|r| encode_targets(&r.label, cfg.mode, cfg.regression_targets)).collect()
}
