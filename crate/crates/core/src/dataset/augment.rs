use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DrivingRecord;
use crate::error::{Error, Result};
use crate::render::Frame;
use crate::vehicle::ControlCommand;

/// Training-time augmentation, applied in the order translate, blur, flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub jitter: bool,
    /// Maximum translation in pixels along each axis.
    pub jitter_px: i32,
    pub blur: bool,
    pub blur_sigma_max: f64,
    pub flip: bool,
    pub flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { jitter: true, jitter_px: 5, blur: true, blur_sigma_max: 1.0, flip: true, flip_prob: 0.5 }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self { jitter: false, blur: false, flip: false, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        !self.jitter && !self.blur && !self.flip
    }

    pub fn validate(&self) -> Result<()> {
        if self.jitter_px < 0 {
            return Err(Error::Config(format!("jitter_px must be non-negative, got {}", self.jitter_px)));
        }
        if !(self.blur_sigma_max.is_finite() && self.blur_sigma_max >= 0.0) {
            return Err(Error::Config(format!("blur_sigma_max must be finite and non-negative, got {}", self.blur_sigma_max)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(record: &DrivingRecord, policy: &AugmentationPolicy, rng: &mut R) -> DrivingRecord {
    let mut frame = record.frame.clone();
    let mut label = record.label;
    if policy.jitter && policy.jitter_px > 0 {
        let dx = rng.gen_range(-policy.jitter_px..=policy.jitter_px);
        let dy = rng.gen_range(-policy.jitter_px..=policy.jitter_px);
        frame = translate(&frame, dx, dy);
    }
    if policy.blur && policy.blur_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..policy.blur_sigma_max);
        frame = gaussian_blur(&frame, sigma);
    }
    if policy.flip && rng.gen_bool(policy.flip_prob.clamp(0.0, 1.0)) {
        frame = frame.hflip();
        label = ControlCommand { steer_deg: -label.steer_deg, ..label };
    }
    DrivingRecord { frame, velocity_mph: record.velocity_mph, label }
}

/// Mirrors the frame and negates the steering label.
pub fn flip_record(record: &DrivingRecord) -> DrivingRecord {
    DrivingRecord {
        frame: record.frame.hflip(),
        velocity_mph: record.velocity_mph,
        label: ControlCommand { steer_deg: -record.label.steer_deg, ..record.label },
    }
}

/// Shifts content by (dx, dy) pixels, replicating edge pixels into the gap.
pub fn translate(frame: &Frame, dx: i32, dy: i32) -> Frame {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut pixels = Vec::with_capacity(frame.pixels.len());
    for y in 0..h {
        let sy = (y - dy as i64).clamp(0, h - 1);
        for x in 0..w {
            let sx = (x - dx as i64).clamp(0, w - 1);
            pixels.push(frame.pixels[(sy * w + sx) as usize]);
        }
    }
    Frame { width: frame.width, height: frame.height, pixels }
}

/// Separable Gaussian blur with radius ceil(3σ) and replicated edges.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    let radius = (3.0 * sigma).ceil() as i64;
    if !(sigma > 0.0) || radius == 0 {
        return frame.clone();
    }
    let mut kernel: Vec<f32> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut tmp = vec![0f32; frame.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x + i as i64 - radius).clamp(0, w - 1);
                acc += k * frame.pixels[(y * w + sx) as usize] as f32;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut pixels = Vec::with_capacity(frame.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y + i as i64 - radius).clamp(0, h - 1);
                acc += k * tmp[(sy * w + x) as usize];
            }
            pixels.push(acc.round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame { width: frame.width, height: frame.height, pixels }
}
