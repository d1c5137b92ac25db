mod bundle;
mod codec;
mod config;
mod network;
mod saliency;

pub use bundle::ModelBundle;
pub use codec::*;
pub use config::{ModelConfig, VELOCITY_SCALE_MPH};
pub use network::{DrivingModel, ForwardPass, Heads, Phase, Predictions, RunningStats, BN_MOMENTUM};
pub use saliency::{heatmap, mass_fraction_from_row, saliency, saliency_raw, SaliencyTarget};
