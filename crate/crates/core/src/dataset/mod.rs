//! Labeled driving datasets: `manifest.json` plus fixed-stride little-endian
//! `records.bin`, stored in shuffled order with the splits as index ranges.

mod augment;
mod stats;
mod synth;

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{augment, flip_record, gaussian_blur, translate, AugmentationPolicy};
pub use stats::{label_stats, LabelStats};
pub use synth::{synthesize, synthesize_states, SynthConfig, LABEL_DECIMATION};

use crate::error::{Error, Result};
use crate::render::{Frame, FrameSize};
use crate::vehicle::ControlCommand;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
pub const FORMAT_VERSION: u32 = 1;

/// One labeled example: the frame, the speed in MPH, and the oracle's command.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingRecord {
    pub frame: Frame,
    pub velocity_mph: f32,
    pub label: ControlCommand,
}

impl DrivingRecord {
    /// Rounds the label to the f32 precision it is stored with, so records
    /// compare equal after a write/read cycle.
    pub fn new(frame: Frame, velocity_mph: f32, label: ControlCommand) -> Self {
        let label = ControlCommand {
            steer_deg: label.steer_deg as f32 as f64,
            throttle: label.throttle as f32 as f64,
            brake: label.brake as f32 as f64,
        };
        Self { frame, velocity_mph, label }
    }

    fn stride(size: FrameSize) -> usize {
        size.pixels() + 16
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.frame.pixels);
        for v in [self.velocity_mph, self.label.steer_deg as f32, self.label.throttle as f32, self.label.brake as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_from(bytes: &[u8], size: FrameSize) -> Self {
        let n = size.pixels();
        let f = |i: usize| f32::from_le_bytes(bytes[n + 4 * i..n + 4 * i + 4].try_into().expect("4 bytes"));
        DrivingRecord {
            frame: Frame { width: size.width, height: size.height, pixels: bytes[..n].to_vec() },
            velocity_mph: f(0),
            label: ControlCommand { steer_deg: f(1) as f64, throttle: f(2) as f64, brake: f(3) as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle records, then cut 92/4/4.
    #[default]
    Random,
    /// Keep temporal order and cut 92/4/4.
    Contiguous,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMode::Random),
            "contiguous" => Ok(SplitMode::Contiguous),
            _ => Err(Error::Config(format!("unknown split mode {s:?} (random|contiguous)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 92/4/4, rounding validation to the nearest record and giving the
    /// remainder to test.
    pub fn for_records(n: usize) -> Self {
        let train = ((n as f64) * 0.92).round() as usize;
        let val = (((n as f64) * 0.04).round() as usize).min(n - train);
        Self { train, val, test: n - train - val }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Half-open record index ranges in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

impl SplitRanges {
    pub fn from_counts(c: SplitCounts) -> Self {
        Self { train: [0, c.train], val: [c.train, c.train + c.val], test: [c.train + c.val, c.total()] }
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let r = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        r[0]..r[1]
    }
}

/// Pixel statistics of the training split, on the [0, 1] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// From exact integer sums of pixel values and their squares.
    pub fn from_sums(count: u64, sum: u64, sum_sq: u64) -> Self {
        if count == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = count as f64;
        let mean = sum as f64 / n / 255.0;
        // n²·var exactly, so a constant dataset gives std 0.
        let scaled = count as u128 * sum_sq as u128 - sum as u128 * sum as u128;
        let var = scaled as f64 / (n * n) / (255.0 * 255.0);
        Self { mean, std: var.sqrt() }
    }

    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let (mut count, mut sum, mut sum_sq) = (0u64, 0u64, 0u64);
        for f in frames {
            count += f.pixels.len() as u64;
            for &p in &f.pixels {
                sum += p as u64;
                sum_sq += (p as u64) * (p as u64);
            }
        }
        Self::from_sums(count, sum, sum_sq)
    }
}

/// (p/255 − mean)/std for every pixel.
pub fn normalize(frame: &Frame, norm: &Normalization) -> Result<Vec<f32>> {
    let mut out = vec![0.0; frame.pixels.len()];
    normalize_into(frame, norm, &mut out)?;
    Ok(out)
}

pub fn normalize_into(frame: &Frame, norm: &Normalization, out: &mut [f32]) -> Result<()> {
    if !(norm.std > 0.0) {
        return Err(Error::ZeroStd);
    }
    let scale = 1.0 / (255.0 * norm.std);
    let shift = norm.mean / norm.std;
    for (o, &p) in out.iter_mut().zip(&frame.pixels) {
        *o = (p as f64 * scale - shift) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub frame_width: usize,
    pub frame_height: usize,
    pub record_count: usize,
    pub split_counts: SplitCounts,
    pub splits: SplitRanges,
    pub split_mode: SplitMode,
    pub rng_seed: u64,
    pub track_name: String,
    pub label_rate_hz: f64,
    pub normalization: Normalization,
}

impl DatasetManifest {
    pub fn frame_size(&self) -> FrameSize {
        FrameSize::new(self.frame_width, self.frame_height)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported dataset version {}", self.version)));
        }
        if self.split_counts.total() != self.record_count {
            return Err(Error::Dataset("split counts do not sum to the record count".into()));
        }
        if self.splits != SplitRanges::from_counts(self.split_counts) {
            return Err(Error::Dataset("split ranges disagree with split counts".into()));
        }
        Ok(())
    }
}

/// A dataset held in memory, records in file order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<DrivingRecord>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir)?;
        let path = dir.join(RECORDS_FILE);
        let mut bytes = Vec::new();
        BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        let size = manifest.frame_size();
        let stride = DrivingRecord::stride(size);
        if bytes.len() != stride * manifest.record_count {
            return Err(Error::Dataset(format!(
                "{} holds {} bytes, expected {} records of {stride}",
                path.display(),
                bytes.len(),
                manifest.record_count
            )));
        }
        let records = bytes.chunks_exact(stride).map(|c| DrivingRecord::read_from(c, size)).collect();
        Ok(Self { manifest, records })
    }

    /// Writes both files; the manifest goes last.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.records.len() * DrivingRecord::stride(self.manifest.frame_size()));
        for r in &self.records {
            r.write_to(&mut bytes);
        }
        let path = dir.join(RECORDS_FILE);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        write_manifest(dir, &self.manifest)
    }

    pub fn split(&self, split: Split) -> &[DrivingRecord] {
        &self.records[self.manifest.splits.range(split)]
    }
}

pub(crate) fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(SplitCounts::for_records(1000), SplitCounts { train: 920, val: 40, test: 40 });
        assert_eq!(SplitCounts::for_records(10_000), SplitCounts { train: 9200, val: 400, test: 400 });
        for n in 0..300 {
            let c = SplitCounts::for_records(n);
            assert_eq!(c.total(), n);
        }
        let r = SplitRanges::from_counts(SplitCounts::for_records(1000));
        assert_eq!(r.range(Split::Val), 920..960);
        assert_eq!(r.range(Split::Test), 960..1000);
    }

    #[test]
    fn normalization_matches_pixel_rule() {
        let f = Frame::new(2, 1, vec![0, 255]).unwrap();
        let norm = Normalization::from_frames([&f]);
        assert!((norm.mean - 0.5).abs() < 1e-12);
        assert!((norm.std - 0.5).abs() < 1e-12);
        let v = normalize(&f, &norm).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
        // A pixel equal to the mean maps to zero.
        let norm = Normalization { mean: 100.0 / 255.0, std: 0.2 };
        let v = normalize(&Frame::filled(1, 1, 100), &norm).unwrap();
        assert!(v[0].abs() < 1e-6);
    }

    #[test]
    fn constant_dataset_cannot_normalize() {
        let f = Frame::filled(4, 4, 77);
        let norm = Normalization::from_frames([&f, &f]);
        assert_eq!(norm.std, 0.0);
        assert!(matches!(normalize(&f, &norm), Err(Error::ZeroStd)));
    }
}
