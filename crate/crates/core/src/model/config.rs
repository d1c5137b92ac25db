use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::{ModelMode, RegressionTargets, ACCEL_CLASSES, STEERING_CLASSES};
use crate::error::{Error, Result};
use crate::render::FrameSize;

/// Speed divisor for the velocity input.
pub const VELOCITY_SCALE_MPH: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub velocity_input: bool,
    /// Basic blocks per stage; four stages.
    pub stage_blocks: Vec<usize>,
    pub base_channels: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub steering_classes: usize,
    pub accel_classes: usize,
    /// Width of the hidden fully connected layer.
    pub hidden_units: usize,
    pub regression_targets: RegressionTargets,
    pub steer_loss_weight: f64,
    pub accel_loss_weight: f64,
    /// Stride-2 stem plus max pool. Defaults to on for inputs wider than 128.
    pub strided_stem: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Classification,
            velocity_input: true,
            stage_blocks: vec![2, 2, 2, 2],
            base_channels: 16,
            input_width: 64,
            input_height: 36,
            steering_classes: STEERING_CLASSES,
            accel_classes: ACCEL_CLASSES,
            hidden_units: 64,
            regression_targets: RegressionTargets::Rescaled,
            steer_loss_weight: 1.0,
            accel_loss_weight: 1.0,
            strided_stem: None,
        }
    }
}

impl ModelConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn input_size(&self) -> FrameSize {
        FrameSize::new(self.input_width, self.input_height)
    }

    pub fn uses_strided_stem(&self) -> bool {
        self.strided_stem.unwrap_or(self.input_width > 128)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage_blocks.len() != 4 || self.stage_blocks.iter().any(|&b| b == 0) {
            return fail("stage_blocks must list four stages of at least one block");
        }
        if self.base_channels == 0 || self.hidden_units == 0 {
            return fail("base_channels and hidden_units must be positive");
        }
        if self.mode == ModelMode::Classification
            && (self.steering_classes != STEERING_CLASSES || self.accel_classes != ACCEL_CLASSES)
        {
            return fail("classification needs 36 steering classes and 3 acceleration classes");
        }
        if self.input_width < 8 || self.input_height < 8 {
            return fail("input must be at least 8x8");
        }
        if !(self.steer_loss_weight >= 0.0 && self.accel_loss_weight >= 0.0) {
            return fail("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_hash_is_stable() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), ModelConfig::default().hash());
        let other = ModelConfig { velocity_input: false, ..c.clone() };
        assert_ne!(c.hash(), other.hash());
        assert!(!c.uses_strided_stem());
        assert!(ModelConfig { input_width: 320, input_height: 180, ..c }.uses_strided_stem());
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        assert!(ModelConfig { stage_blocks: vec![2, 2, 2], ..base.clone() }.validate().is_err());
        assert!(ModelConfig { stage_blocks: vec![2, 0, 2, 2], ..base.clone() }.validate().is_err());
        assert!(ModelConfig { steering_classes: 10, ..base.clone() }.validate().is_err());
        let reg = ModelConfig { mode: ModelMode::Regression, steering_classes: 10, ..base };
        assert!(reg.validate().is_ok());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"mode":"regression","velocity_input":false}"#).unwrap();
        assert_eq!(c.mode, ModelMode::Regression);
        assert_eq!(c.stage_blocks, vec![2, 2, 2, 2]);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
