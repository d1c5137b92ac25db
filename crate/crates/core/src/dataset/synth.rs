use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    write_manifest, DatasetManifest, DrivingRecord, Normalization, SplitCounts, SplitMode, SplitRanges, FORMAT_VERSION,
    RECORDS_FILE,
};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, OracleParams};
use crate::render::{render, CameraParams, FrameSize};
use crate::seed::{derive_seed, rng_for};
use crate::track::TrackSpec;
use crate::vehicle::{step, CarParams, CarState, ControlCommand, PHYSICS_DT};

/// Physics steps per kept label (100 Hz physics, 10 Hz labels).
pub const LABEL_DECIMATION: u64 = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub frame_size: FrameSize,
    pub seed: u64,
    pub camera: CameraParams,
    pub split_mode: SplitMode,
    /// Render workers; 0 means one per available core.
    #[serde(default)]
    pub threads: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 1000.0,
            frame_size: FrameSize::new(64, 36),
            seed: 0,
            camera: CameraParams::default(),
            split_mode: SplitMode::Random,
            threads: 0,
        }
    }
}

/// Drives the oracle from rest at s = 0 and returns the state and command at
/// every 10 Hz label tick, in temporal order.
pub fn synthesize_states(
    track: &TrackSpec,
    car: &CarParams,
    oracle_params: &OracleParams,
    duration_s: f64,
) -> Result<Vec<(CarState, ControlCommand)>> {
    let oracle = Oracle::new(track, *car, *oracle_params);
    let start = track.sample(0);
    let mut state = CarState::at_rest(start, track.tangent(0));
    let steps = (duration_s / PHYSICS_DT).round() as u64;
    let mut out = Vec::with_capacity((steps / LABEL_DECIMATION + 1) as usize);
    for i in 0..steps {
        let cmd = oracle.command(&state)?;
        if i % LABEL_DECIMATION == 0 {
            out.push((state, cmd));
        }
        state = step(&state, &cmd, car, PHYSICS_DT)?;
    }
    Ok(out)
}

/// Generates a dataset into `out_dir` and returns its manifest.
///
/// Frames are rendered by a pool of workers and written straight into their
/// shuffled slot in `records.bin`, so the output does not depend on the
/// worker count. The manifest is written last.
pub fn synthesize(
    track: &TrackSpec,
    car: &CarParams,
    oracle_params: &OracleParams,
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if !config.frame_size.is_supported() {
        return Err(Error::UnsupportedSize(config.frame_size.width, config.frame_size.height));
    }
    config.camera.validate()?;
    if !(config.duration_s > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let samples = synthesize_states(track, car, oracle_params, config.duration_s)?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    // slot[i] is the file position of temporal sample i.
    let mut order: Vec<usize> = (0..n).collect();
    if config.split_mode == SplitMode::Random {
        order.shuffle(&mut rng_for(config.seed, "dataset/shuffle"));
    }
    let mut slot = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        slot[i] = pos;
    }
    let counts = SplitCounts::for_records(n);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(RECORDS_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let stride = DrivingRecord::stride(config.frame_size);
    file.set_len((stride * n) as u64).map_err(|e| Error::io(&path, e))?;

    let threads = if config.threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { config.threads };
    let next = AtomicUsize::new(0);
    let (tx, rx) = crossbeam_channel::bounded::<Result<(usize, DrivingRecord)>>(64);
    let (mut count, mut sum, mut sum_sq) = (0u64, 0u64, 0u64);

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, samples) = (&next, &samples);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let (state, cmd) = &samples[i];
                let seed = derive_seed(config.seed, &format!("render/{i}"));
                let msg = render(track, state, &config.camera, config.frame_size, seed)
                    .map(|frame| (i, DrivingRecord::new(frame, state.speed_mph() as f32, *cmd)));
                let failed = msg.is_err();
                if tx.send(msg).is_err() || failed {
                    break;
                }
            });
        }
        drop(tx);
        let mut buf = Vec::with_capacity(stride);
        for msg in rx.iter() {
            let (i, record) = msg?;
            let pos = slot[i];
            if pos < counts.train {
                count += record.frame.pixels.len() as u64;
                for &p in &record.frame.pixels {
                    sum += p as u64;
                    sum_sq += (p as u64) * (p as u64);
                }
            }
            buf.clear();
            record.write_to(&mut buf);
            file.seek(SeekFrom::Start((pos * stride) as u64)).map_err(|e| Error::io(&path, e))?;
            file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    file.sync_all().map_err(|e| Error::io(&path, e))?;

    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        frame_width: config.frame_size.width,
        frame_height: config.frame_size.height,
        record_count: n,
        split_counts: counts,
        splits: SplitRanges::from_counts(counts),
        split_mode: config.split_mode,
        rng_seed: config.seed,
        track_name: track.name.clone(),
        label_rate_hz: 1.0 / (PHYSICS_DT * LABEL_DECIMATION as f64),
        normalization: Normalization::from_sums(count, sum, sum_sq),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Split};
    use crate::track::bundled_track;

    fn small_config(seed: u64, threads: usize) -> SynthConfig {
        SynthConfig { duration_s: 30.0, seed, threads, ..Default::default() }
    }

    #[test]
    fn round_trip_and_thread_independence() {
        let track = bundled_track("oval").unwrap();
        let (car, op) = (CarParams::default(), OracleParams::default());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synthesize(&track, &car, &op, &small_config(7, 1), a.path()).unwrap();
        let mb = synthesize(&track, &car, &op, &small_config(7, 3), b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.record_count, 300);
        let ra = std::fs::read(a.path().join(RECORDS_FILE)).unwrap();
        let rb = std::fs::read(b.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(ra, rb);

        let ds = Dataset::load(a.path()).unwrap();
        let c = tempfile::tempdir().unwrap();
        ds.write(c.path()).unwrap();
        let again = Dataset::load(c.path()).unwrap();
        assert_eq!(again.records, ds.records);
        assert_eq!(again.manifest, ds.manifest);

        let expect = Normalization::from_frames(ds.split(Split::Train).iter().map(|r| &r.frame));
        assert_eq!(expect, ds.manifest.normalization);
    }

    #[test]
    fn seeds_change_shuffle_and_noise() {
        let track = bundled_track("oval").unwrap();
        let (car, op) = (CarParams::default(), OracleParams::default());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize(&track, &car, &op, &small_config(1, 1), a.path()).unwrap();
        synthesize(&track, &car, &op, &small_config(2, 1), b.path()).unwrap();
        let ra = std::fs::read(a.path().join(RECORDS_FILE)).unwrap();
        let rb = std::fs::read(b.path().join(RECORDS_FILE)).unwrap();
        assert_ne!(ra, rb);
    }

    #[test]
    fn contiguous_split_keeps_time_order() {
        let track = bundled_track("oval").unwrap();
        let (car, op) = (CarParams::default(), OracleParams::default());
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { split_mode: SplitMode::Contiguous, ..small_config(3, 2) };
        synthesize(&track, &car, &op, &cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        // The car starts at rest and only accelerates in the first seconds.
        assert_eq!(ds.records[0].velocity_mph, 0.0);
        assert!(ds.records[1..50].windows(2).all(|w| w[1].velocity_mph > w[0].velocity_mph));
    }

    #[test]
    fn rejects_bad_sizes() {
        let track = bundled_track("oval").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { frame_size: FrameSize::new(100, 50), ..small_config(0, 1) };
        let err = synthesize(&track, &CarParams::default(), &OracleParams::default(), &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedSize(100, 50)));
    }
}
