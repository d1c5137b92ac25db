use std::path::Path;

use super::config::ModelConfig;
use super::network::{DrivingModel, Predictions};
use crate::autodiff::{pack_f64, read_checkpoint, unpack_f64, write_checkpoint, Checkpoint, Tensor};
use crate::dataset::{normalize_into, Normalization};
use crate::error::{Error, Result};
use crate::render::Frame;

const CONFIG_TENSOR: &str = "meta.config_json";
const NORM_TENSOR: &str = "meta.normalization";

/// A model together with the pixel statistics it was trained against.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: DrivingModel,
    pub normalization: Normalization,
}

impl ModelBundle {
    pub fn new(model: DrivingModel, normalization: Normalization) -> Self {
        Self { model, normalization }
    }

    /// Checkpoint holding the weights, running statistics, config and
    /// normalization, followed by `extra` tensors.
    pub fn to_checkpoint(&self, extra: Vec<(String, Tensor<f32>)>) -> Checkpoint {
        let config = self.model.config();
        let json = serde_json::to_string(config).expect("config serializes");
        let mut tensors = self.model.named_tensors();
        tensors.push((
            CONFIG_TENSOR.to_string(),
            Tensor { shape: vec![json.len()], data: json.bytes().map(f32::from).collect() },
        ));
        tensors.push((NORM_TENSOR.to_string(), pack_f64(&[self.normalization.mean, self.normalization.std])));
        tensors.extend(extra);
        Checkpoint { config_hash: config.hash(), tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |n: &str| Error::Checkpoint(format!("missing tensor {n}"));
        let raw = ckpt.get(CONFIG_TENSOR).ok_or_else(|| missing(CONFIG_TENSOR))?;
        let bytes = raw
            .data
            .iter()
            .map(|&v| if v.fract() == 0.0 && (0.0..256.0).contains(&v) { Ok(v as u8) } else { Err(Error::Checkpoint("config bytes corrupt".into())) })
            .collect::<Result<Vec<u8>>>()?;
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        config.validate()?;
        if config.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {:016x} does not match header {:016x}",
                config.hash(),
                ckpt.config_hash
            )));
        }
        let norm = unpack_f64(ckpt.get(NORM_TENSOR).ok_or_else(|| missing(NORM_TENSOR))?)?;
        let [mean, std] = norm[..] else {
            return Err(Error::Checkpoint("normalization needs two values".into()));
        };
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(Error::Checkpoint(format!("invalid normalization mean {mean} std {std}")));
        }
        let mut model = DrivingModel::new(config, 0)?;
        model.load_named(&|n| ckpt.get(n).cloned())?;
        Ok(Self { model, normalization: Normalization { mean, std } })
    }

    /// Normalizes `frames` and runs inference. `velocity_mph` is ignored by
    /// models built without the velocity input.
    pub fn predict(&self, frames: &[&Frame], velocity_mph: &[f32]) -> Result<Predictions> {
        let cfg = self.model.config();
        let (w, h) = (cfg.input_width, cfg.input_height);
        if velocity_mph.len() != frames.len() {
            return Err(Error::Mismatch(format!("{} frames but {} velocities", frames.len(), velocity_mph.len())));
        }
        let mut data = vec![0.0f32; frames.len() * w * h];
        for (f, out) in frames.iter().zip(data.chunks_mut(w * h)) {
            if (f.width, f.height) != (w, h) {
                return Err(Error::Mismatch(format!("model expects {w}x{h} frames, got {}x{}", f.width, f.height)));
            }
            normalize_into(f, &self.normalization, out)?;
        }
        let x = Tensor { shape: vec![frames.len(), 1, h, w], data };
        self.model.forward_eval(&x, if cfg.velocity_input { velocity_mph } else { &[] })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(Vec::new()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
