use std::path::Path;

use ignition::dataset::{synthesize, Dataset, SynthConfig};
use ignition::model::{ModelConfig, ModelMode};
use ignition::oracle::OracleParams;
use ignition::track::bundled_track;
use ignition::vehicle::CarParams;

/// Synthesizes `duration_s` seconds of oracle driving on a bundled track into `dir`.
pub fn dataset(dir: &Path, track: &str, duration_s: f64, seed: u64) -> Dataset {
    let track = bundled_track(track).expect("bundled track");
    let config = SynthConfig { duration_s, seed, threads: 1, ..Default::default() };
    synthesize(&track, &CarParams::default(), &OracleParams::default(), &config, dir).expect("synthesis");
    Dataset::load(dir).expect("load dataset")
}

/// A narrow network that trains quickly on one core.
pub fn small_model(mode: ModelMode) -> ModelConfig {
    ModelConfig { mode, stage_blocks: vec![1, 1, 1, 1], base_channels: 8, hidden_units: 32, ..Default::default() }
}
