//! Driver's-eye grayscale frames by per-pixel ground-plane ray casting.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::{Point, TrackSpec};
use crate::vehicle::CarState;

pub const SKY: u8 = 180;
pub const TRACK_SURFACE: u8 = 110;
pub const OFF_TRACK: u8 = 50;
pub const BOUNDARY_LINE: u8 = 230;
pub const BOUNDARY_LINE_WIDTH_M: f64 = 0.3;

pub const SUPPORTED_SIZES: [FrameSize; 3] =
    [FrameSize { width: 320, height: 180 }, FrameSize { width: 160, height: 90 }, FrameSize { width: 64, height: 36 }];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: usize,
    pub height: usize,
}

impl FrameSize {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub const fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn is_supported(&self) -> bool {
        SUPPORTED_SIZES.contains(self)
    }
}

impl std::fmt::Display for FrameSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for FrameSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = || -> Option<FrameSize> {
            let (w, h) = s.split_once(['x', 'X'])?;
            Some(FrameSize::new(w.trim().parse().ok()?, h.trim().parse().ok()?))
        };
        let size = parse().ok_or_else(|| Error::Config(format!("cannot parse frame size {s:?}; expected WxH")))?;
        if !size.is_supported() {
            return Err(Error::UnsupportedSize(size.width, size.height));
        }
        Ok(size)
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{} pixels for a {width}x{height} frame", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn size(&self) -> FrameSize {
        FrameSize::new(self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn hflip(&self) -> Frame {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width) {
            pixels.extend(row.iter().rev());
        }
        Frame { width: self.width, height: self.height, pixels }
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f64 {
        assert_eq!(self.size(), other.size());
        let sum: u64 = self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
        sum as f64 / self.pixels.len() as f64
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Frame> {
        let bad = |m: &str| Error::Shape(format!("malformed PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing data"))?;
        if data.len() < w * h {
            return Err(bad("short data"));
        }
        Frame::new(w, h, data[..w * h].to_vec())
    }
}

/// Box-filter downsampling; each output pixel is the block mean rounded half up.
pub fn downsample(frame: &Frame, target: FrameSize) -> Result<Frame> {
    let (w, h) = (frame.width, frame.height);
    if target.width == 0 || target.height == 0 || w % target.width != 0 || h % target.height != 0 {
        return Err(Error::NonDivisible { from_w: w, from_h: h, to_w: target.width, to_h: target.height });
    }
    let (fx, fy) = (w / target.width, h / target.height);
    let n = (fx * fy) as u32;
    let mut pixels = Vec::with_capacity(target.pixels());
    for ty in 0..target.height {
        for tx in 0..target.width {
            let mut sum = 0u32;
            for y in ty * fy..(ty + 1) * fy {
                let row = &frame.pixels[y * w + tx * fx..y * w + (tx + 1) * fx];
                sum += row.iter().map(|&p| p as u32).sum::<u32>();
            }
            pixels.push(((2 * sum + n) / (2 * n)) as u8);
        }
    }
    Ok(Frame { width: target.width, height: target.height, pixels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraParams {
    /// Meters ahead of the car's reference point.
    pub forward_offset: f64,
    /// Meters above the ground.
    pub height: f64,
    pub horizontal_fov_deg: f64,
    /// Downward tilt; sets where the horizon falls in the frame.
    pub pitch_deg: f64,
    /// Standard deviation of additive per-pixel noise, in gray levels.
    pub render_noise_sigma: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            forward_offset: 1.0,
            height: 1.2,
            horizontal_fov_deg: 90.0,
            // Puts the horizon one third of the way down a 16:9 frame.
            pitch_deg: (0.5625f64 / 3.0).atan().to_degrees(),
            render_noise_sigma: 2.0,
        }
    }
}

impl CameraParams {
    pub fn noiseless(self) -> Self {
        Self { render_noise_sigma: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.height > 0.0) || !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(Error::InvalidParams("camera height must be positive and fov in (0, 180)".into()));
        }
        if !(self.render_noise_sigma >= 0.0) {
            return Err(Error::InvalidParams("render noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn tan_half_h(&self) -> f64 {
        (self.horizontal_fov_deg.to_radians() / 2.0).tan()
    }

    /// Number of sky rows at the top of a frame of this size.
    pub fn horizon_row(&self, size: FrameSize) -> usize {
        let tan_v = self.tan_half_h() * size.height as f64 / size.width as f64;
        let (sin_p, cos_p) = self.pitch_deg.to_radians().sin_cos();
        (0..size.height).take_while(|&r| ray_drop(r, size.height, tan_v, sin_p, cos_p) <= 0.0).count()
    }
}

/// Downward component of the unnormalized ray through row `r`.
fn ray_drop(r: usize, height: usize, tan_v: f64, sin_p: f64, cos_p: f64) -> f64 {
    let half = height as f64 / 2.0;
    let y_ndc = (r as f64 + 0.5 - half) / half;
    sin_p + y_ndc * tan_v * cos_p
}

/// Renders the view from the hood. Deterministic given (state, seed).
pub fn render(track: &TrackSpec, state: &CarState, camera: &CameraParams, size: FrameSize, seed: u64) -> Result<Frame> {
    if !size.is_supported() {
        return Err(Error::UnsupportedSize(size.width, size.height));
    }
    let (w, h) = (size.width, size.height);
    let tan_h = camera.tan_half_h();
    let tan_v = tan_h * h as f64 / w as f64;
    let (sin_p, cos_p) = camera.pitch_deg.to_radians().sin_cos();
    let (sin_h, cos_h) = state.heading.sin_cos();
    let forward = Point::new(cos_h, sin_h);
    let left = Point::new(-sin_h, cos_h);
    let cam = state.position() + forward * camera.forward_offset;
    let half_w = w as f64 / 2.0;
    let half_width = track.width / 2.0;
    let line_inner = half_width - BOUNDARY_LINE_WIDTH_M;
    let samples = track.centerline();

    let mut pixels = vec![SKY; w * h];
    for r in 0..h {
        let drop = ray_drop(r, h, tan_v, sin_p, cos_p);
        if drop <= 0.0 {
            continue;
        }
        let half_h = h as f64 / 2.0;
        let b = -((r as f64 + 0.5 - half_h) / half_h) * tan_v;
        // Horizontal part of (camera forward + b · camera up), scaled to the ground.
        let t = camera.height / drop;
        let along = (cos_p + b * sin_p) * t;
        let row = &mut pixels[r * w..(r + 1) * w];
        for (c, px) in row.iter_mut().enumerate() {
            let x_ndc = (c as f64 + 0.5 - half_w) / half_w;
            let lateral = -x_ndc * tan_h * t;
            let hit = Point::new(
                cam.x + along * forward.x + lateral * left.x,
                cam.y + along * forward.y + lateral * left.y,
            );
            *px = match track.index().nearest_nearby(samples, hit) {
                None => OFF_TRACK,
                Some(k) => {
                    let off = track.lateral_offset_at(k, hit).abs();
                    if off > half_width {
                        OFF_TRACK
                    } else if off >= line_inner {
                        BOUNDARY_LINE
                    } else {
                        TRACK_SURFACE
                    }
                }
            };
        }
    }

    if camera.render_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, camera.render_noise_sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
        for p in pixels.iter_mut() {
            let v = *p as f64 + noise.sample(&mut rng);
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Frame { width: w, height: h, pixels })
}
