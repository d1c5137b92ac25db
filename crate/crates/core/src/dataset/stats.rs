use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DrivingRecord;
use crate::error::{Error, Result};
use crate::model::{bucket_center, steering_bucket, AccelClass, ACCEL_CLASSES, STEERING_CLASSES};

pub const PEDAL_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub count: usize,
    /// 36 ten-degree bins over [−180, 180].
    pub steering_hist: Vec<u64>,
    /// 10 bins over [0, 1].
    pub throttle_hist: Vec<u64>,
    pub brake_hist: Vec<u64>,
    /// Fraction of records whose throttle is exactly 0 or 1.
    pub throttle_extreme_fraction: f64,
    pub brake_extreme_fraction: f64,
    /// Fraction of records with throttle and brake both nonzero.
    pub both_pedals_fraction: f64,
    pub steering_mean: f64,
    pub steering_std: f64,
    /// Center of the most populated steering bin.
    pub steering_mode_deg: f64,
    pub accel_class_counts: Vec<u64>,
    pub accel_class_priors: Vec<f64>,
}

fn pedal_bin(v: f64) -> usize {
    ((v * PEDAL_BINS as f64).floor().max(0.0) as usize).min(PEDAL_BINS - 1)
}

pub fn label_stats(records: &[DrivingRecord]) -> Result<LabelStats> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = records.len();
    let mut steering_hist = vec![0u64; STEERING_CLASSES];
    let mut throttle_hist = vec![0u64; PEDAL_BINS];
    let mut brake_hist = vec![0u64; PEDAL_BINS];
    let mut accel = vec![0u64; ACCEL_CLASSES];
    let (mut t_ext, mut b_ext, mut both) = (0usize, 0usize, 0usize);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for r in records {
        let l = &r.label;
        steering_hist[steering_bucket(l.steer_deg)] += 1;
        throttle_hist[pedal_bin(l.throttle)] += 1;
        brake_hist[pedal_bin(l.brake)] += 1;
        accel[AccelClass::from_pedals(l.throttle, l.brake).index()] += 1;
        t_ext += (l.throttle == 0.0 || l.throttle == 1.0) as usize;
        b_ext += (l.brake == 0.0 || l.brake == 1.0) as usize;
        both += (l.throttle != 0.0 && l.brake != 0.0) as usize;
        sum += l.steer_deg;
        sum_sq += l.steer_deg * l.steer_deg;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let mode = (0..STEERING_CLASSES).max_by_key(|&i| (steering_hist[i], std::cmp::Reverse(i))).expect("non-empty");
    Ok(LabelStats {
        count: n,
        throttle_extreme_fraction: t_ext as f64 / nf,
        brake_extreme_fraction: b_ext as f64 / nf,
        both_pedals_fraction: both as f64 / nf,
        steering_mean: mean,
        steering_std: (sum_sq / nf - mean * mean).max(0.0).sqrt(),
        steering_mode_deg: bucket_center(mode),
        accel_class_priors: accel.iter().map(|&c| c as f64 / nf).collect(),
        accel_class_counts: accel,
        steering_hist,
        throttle_hist,
        brake_hist,
    })
}

impl LabelStats {
    /// Text histograms for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let bar = |count: u64, max: u64| "#".repeat(((count as f64 / max.max(1) as f64) * 40.0).round() as usize);
        let _ = writeln!(out, "records: {}", self.count);
        let _ = writeln!(out, "steering (deg): mean {:.2}, std {:.2}, mode {:.0}", self.steering_mean, self.steering_std, self.steering_mode_deg);
        let max = *self.steering_hist.iter().max().unwrap_or(&0);
        for (i, &c) in self.steering_hist.iter().enumerate() {
            if c > 0 {
                let lo = -180 + 10 * i as i32;
                let _ = writeln!(out, "  [{:>4},{:>4}) {:>7} {}", lo, lo + 10, c, bar(c, max));
            }
        }
        for (name, hist, ext) in [
            ("throttle", &self.throttle_hist, self.throttle_extreme_fraction),
            ("brake", &self.brake_hist, self.brake_extreme_fraction),
        ] {
            let _ = writeln!(out, "{name}: {:.1}% at 0 or 1", 100.0 * ext);
            let max = *hist.iter().max().unwrap_or(&0);
            for (i, &c) in hist.iter().enumerate() {
                let _ = writeln!(out, "  [{:.1},{:.1}) {:>7} {}", i as f64 / 10.0, (i + 1) as f64 / 10.0, c, bar(c, max));
            }
        }
        let _ = writeln!(out, "both pedals pressed: {:.2}%", 100.0 * self.both_pedals_fraction);
        let _ = writeln!(
            out,
            "accel classes: throttle {:.3}, brake {:.3}, neutral {:.3}",
            self.accel_class_priors[0], self.accel_class_priors[1], self.accel_class_priors[2]
        );
        out
    }
}
