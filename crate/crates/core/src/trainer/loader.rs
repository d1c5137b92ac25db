use std::borrow::Cow;
use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;

use crossbeam_channel::bounded;

use super::metrics::targets_for;
use crate::autodiff::Tensor;
use crate::dataset::{augment, normalize_into, AugmentationPolicy, DrivingRecord, Normalization};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetEncoding};
use crate::seed::rng_for;

/// Batches buffered between the loader threads and the trainer.
pub const QUEUE_BATCHES: usize = 4;

/// A normalized, encoded minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub frames: Tensor<f32>,
    pub velocity_mph: Vec<f32>,
    pub targets: Vec<TargetEncoding>,
}

/// Augments (with a stream derived from `rng_seed`), normalizes and encodes
/// the records at `indices`.
pub fn build_batch(
    records: &[DrivingRecord],
    indices: &[usize],
    policy: &AugmentationPolicy,
    rng_seed: u64,
    norm: &Normalization,
    config: &ModelConfig,
) -> Result<Batch> {
    let (w, h) = (config.input_width, config.input_height);
    let mut rng = rng_for(rng_seed, "batch");
    let mut data = vec![0.0f32; indices.len() * w * h];
    let mut velocity_mph = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (&i, out) in indices.iter().zip(data.chunks_mut(w * h)) {
        let r = records.get(i).ok_or_else(|| Error::Dataset(format!("record index {i} out of range")))?;
        let r = if policy.is_identity() { Cow::Borrowed(r) } else { Cow::Owned(augment(r, policy, &mut rng)) };
        if (r.frame.width, r.frame.height) != (w, h) {
            return Err(Error::Mismatch(format!(
                "model expects {w}x{h} frames, record {i} is {}x{}",
                r.frame.width, r.frame.height
            )));
        }
        normalize_into(&r.frame, norm, out)?;
        velocity_mph.push(r.velocity_mph);
        labels.push(r.into_owned());
    }
    let refs: Vec<&DrivingRecord> = labels.iter().collect();
    let targets = targets_for(config, &refs);
    Ok(Batch { frames: Tensor { shape: vec![indices.len(), 1, h, w], data }, velocity_mph, targets })
}

/// Produces `count` items with `make` and hands them to `consume` in index
/// order. With more than one thread, workers run ahead of the consumer by at
/// most `QUEUE_BATCHES` items plus one per worker. Output does not depend on
/// the thread count as long as `make` is a pure function of its index.
pub fn ordered_pipeline<T: Send>(
    count: usize,
    threads: usize,
    make: impl Fn(usize) -> Result<T> + Sync,
    mut consume: impl FnMut(usize, T) -> Result<ControlFlow<()>>,
) -> Result<()> {
    if threads <= 1 {
        for i in 0..count {
            if consume(i, make(i)?)?.is_break() {
                break;
            }
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let consumed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let window = QUEUE_BATCHES + threads;
    std::thread::scope(|scope| {
        let (tx, rx) = bounded::<(usize, Result<T>)>(QUEUE_BATCHES);
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, consumed, stop, make) = (&next, &consumed, &stop, &make);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    return;
                }
                while i >= consumed.load(Ordering::SeqCst) + window {
                    if stop.load(Ordering::SeqCst) {
                        return;
                    }
                    std::thread::sleep(Duration::from_micros(200));
                }
                if stop.load(Ordering::SeqCst) || tx.send((i, make(i))).is_err() {
                    return;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let outcome = (|| {
            for want in 0..count {
                let item = loop {
                    if let Some(item) = pending.remove(&want) {
                        break item;
                    }
                    let (i, item) = rx.recv().map_err(|_| Error::Dataset("loader threads exited early".into()))?;
                    pending.insert(i, item);
                };
                consumed.store(want + 1, Ordering::SeqCst);
                if consume(want, item?)?.is_break() {
                    break;
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::SeqCst);
        drop(rx);
        outcome
    })
}
