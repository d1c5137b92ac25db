//! Closed-loop driving: render, predict, decode, hold the command over ten
//! physics steps, repeat. A shadow oracle scores every decision.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AccelClass, ModelBundle, Predictions};
use crate::oracle::{LapCounter, Oracle, OracleParams};
use crate::render::{render, CameraParams, Frame, FrameSize};
use crate::seed::derive_seed;
use crate::track::TrackSpec;
use crate::trainer::STEER_TOLERANCE_DEG;
use crate::vehicle::{reset_to_track, step, CarParams, CarState, ControlCommand, PHYSICS_DT};

pub const CONTROL_HZ: f64 = 10.0;
/// Physics steps each command is held for.
pub const PHYSICS_STEPS_PER_CONTROL: usize = 10;
/// Distance beyond the track edge that starts the intervention timer.
pub const INTERVENTION_MARGIN_M: f64 = 2.0;
/// How long the car must stay beyond the margin before it is reset.
pub const INTERVENTION_HOLD_S: f64 = 2.0;

/// Who chooses the commands.
#[derive(Debug, Clone, Copy)]
pub enum Driver<'a> {
    Model(&'a ModelBundle),
    /// The expert itself, sampled at the control rate.
    Oracle,
    /// The same command every step.
    Fixed(ControlCommand),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    pub duration_s: f64,
    pub seed: u64,
    pub camera: CameraParams,
    /// Frame size for non-model drivers; model drivers use their input size.
    pub frame_size: FrameSize,
    /// Pace control steps against the wall clock instead of running flat out.
    pub realtime: bool,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            duration_s: 120.0,
            seed: 0,
            camera: CameraParams::default(),
            frame_size: FrameSize::new(64, 36),
            realtime: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveReport {
    /// Net progress along the track in laps, never negative.
    pub laps_completed: f64,
    pub interventions: usize,
    pub off_track_time_s: f64,
    /// Mean |applied − shadow oracle| steering over on-track control steps.
    pub mean_abs_steer_error_deg: f64,
    /// Share of on-track control steps whose acceleration class matches the shadow oracle.
    pub accel_agreement: f64,
    /// Share of on-track control steps steering within 20 degrees of the shadow oracle.
    pub steer_agreement_within_20deg: f64,
    pub on_track_steps: usize,
    pub control_steps: usize,
    pub duration_s: f64,
}

/// One control step of the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed_mps: f64,
    pub steer_deg: f64,
    pub throttle: f64,
    pub brake: f64,
    pub lateral_offset: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,x,y,heading,speed_mps,steer_deg,throttle,brake,lateral_offset";

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(out, "{TRAJECTORY_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.5},{:.4},{:.3},{},{},{:.4}",
            r.step, r.x, r.y, r.heading, r.speed_mps, r.steer_deg, r.throttle, r.brake, r.lateral_offset
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Decoded model output with class probabilities when the model has them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub command: ControlCommand,
    pub steer_probs: Option<Vec<f32>>,
    pub accel_probs: Option<Vec<f32>>,
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| (e / sum) as f32).collect()
}

/// Runs the model on one frame and decodes its output into a command.
pub fn predict(bundle: &ModelBundle, frame: &Frame, speed_mph: f64) -> Result<Prediction> {
    let preds = bundle.predict(&[frame], &[speed_mph as f32])?;
    if !preds.all_finite() {
        return Err(Error::NonFiniteOutput);
    }
    let command = preds.decode(0, bundle.model.config().regression_targets);
    Ok(match preds {
        Predictions::Classification { .. } => Prediction {
            command,
            steer_probs: preds.steer_logits(0).map(softmax),
            accel_probs: preds.accel_logits(0).map(softmax),
        },
        Predictions::Regression(_) => Prediction { command, steer_probs: None, accel_probs: None },
    })
}

/// What a control step saw and did, for live display.
#[derive(Debug, Clone)]
pub struct ControlFrame {
    pub frame_id: u64,
    pub frame: Frame,
    pub state: CarState,
    /// Model output, when a model is driving or shadowing.
    pub prediction: Option<Prediction>,
    pub applied: ControlCommand,
    pub oracle: Option<ControlCommand>,
}

#[derive(Debug, Clone)]
pub struct DriveOutcome {
    pub report: DriveReport,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Start pose shared by synthesis and driving: at rest on sample 0, facing along the track.
pub fn start_state(track: &TrackSpec) -> CarState {
    CarState::at_rest(track.sample(0), track.tangent(0))
}

#[derive(Default)]
struct Agreement {
    steps: usize,
    steer_err_sum: f64,
    steer_within: usize,
    accel_hits: usize,
}

impl Agreement {
    fn add(&mut self, applied: &ControlCommand, oracle: &ControlCommand) {
        let err = (applied.steer_deg - oracle.steer_deg).abs();
        self.steps += 1;
        self.steer_err_sum += err;
        self.steer_within += (err <= STEER_TOLERANCE_DEG) as usize;
        self.accel_hits += (AccelClass::from_pedals(applied.throttle, applied.brake)
            == AccelClass::from_pedals(oracle.throttle, oracle.brake)) as usize;
    }

    fn ratio(&self, count: usize) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            count as f64 / self.steps as f64
        }
    }
}

/// Closed-loop run of `driver` for `config.duration_s` simulated seconds.
pub fn drive(
    driver: Driver<'_>,
    track: &TrackSpec,
    car: &CarParams,
    oracle_params: &OracleParams,
    config: &DriveConfig,
    mut on_frame: Option<&mut dyn FnMut(&ControlFrame)>,
) -> Result<DriveOutcome> {
    if !(config.duration_s.is_finite() && config.duration_s > 0.0) {
        return Err(Error::Config(format!("drive duration must be positive, got {}", config.duration_s)));
    }
    let size = match driver {
        Driver::Model(b) => b.model.config().input_size(),
        _ => config.frame_size,
    };
    if !size.is_supported() {
        return Err(Error::UnsupportedSize(size.width, size.height));
    }
    let shadow = Oracle::new(track, *car, *oracle_params);
    let half_width = track.width / 2.0;
    let physics_steps = (config.duration_s / PHYSICS_DT).round() as usize;
    let control_steps = physics_steps.div_ceil(PHYSICS_STEPS_PER_CONTROL);

    let mut state = start_state(track);
    let mut laps = LapCounter::new(track, track.locate(state.position()).s);
    let mut interventions = 0;
    let mut off_track_time = 0.0;
    let mut beyond_margin_s = 0.0;
    let mut agreement = Agreement::default();
    let mut trajectory = Vec::with_capacity(control_steps);
    let started = Instant::now();
    let mut physics_done = 0;

    for k in 0..control_steps {
        if config.realtime {
            let due = started + Duration::from_secs_f64(k as f64 / CONTROL_HZ);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let loc = track.locate(state.position());
        let frame = render(track, &state, &config.camera, size, derive_seed(config.seed, &format!("drive/render/{k}")))?;
        let oracle_cmd = shadow.command(&state).ok();
        let (applied, prediction) = match driver {
            Driver::Model(bundle) => {
                let p = predict(bundle, &frame, state.speed_mph())?;
                (p.command, Some(p))
            }
            Driver::Oracle => (shadow.command(&state)?, None),
            Driver::Fixed(cmd) => (cmd, None),
        };
        if let (Some(o), true) = (&oracle_cmd, loc.lateral_offset.abs() <= half_width) {
            agreement.add(&applied, o);
        }
        trajectory.push(TrajectoryRow {
            step: k,
            x: state.x,
            y: state.y,
            heading: state.heading,
            speed_mps: state.speed,
            steer_deg: applied.steer_deg,
            throttle: applied.throttle,
            brake: applied.brake,
            lateral_offset: loc.lateral_offset,
        });
        if let Some(f) = on_frame.as_mut() {
            f(&ControlFrame { frame_id: k as u64, frame, state, prediction, applied, oracle: oracle_cmd });
        }
        let hold = PHYSICS_STEPS_PER_CONTROL.min(physics_steps - physics_done);
        for _ in 0..hold {
            state = step(&state, &applied, car, PHYSICS_DT)?;
            physics_done += 1;
            let loc = track.locate(state.position());
            laps.update(loc.s);
            let off = loc.lateral_offset.abs();
            if off > half_width {
                off_track_time += PHYSICS_DT;
            }
            if off > half_width + INTERVENTION_MARGIN_M {
                beyond_margin_s += PHYSICS_DT;
                if beyond_margin_s >= INTERVENTION_HOLD_S - 1e-9 {
                    state = reset_to_track(&state, track, loc.s);
                    laps.rebase(track.locate(state.position()).s);
                    interventions += 1;
                    beyond_margin_s = 0.0;
                }
            } else {
                beyond_margin_s = 0.0;
            }
        }
    }

    let duration_s = physics_done as f64 * PHYSICS_DT;
    let report = DriveReport {
        laps_completed: laps.laps().max(0.0),
        interventions,
        off_track_time_s: off_track_time.min(duration_s),
        mean_abs_steer_error_deg: if agreement.steps == 0 { 0.0 } else { agreement.steer_err_sum / agreement.steps as f64 },
        accel_agreement: agreement.ratio(agreement.accel_hits),
        steer_agreement_within_20deg: agreement.ratio(agreement.steer_within),
        on_track_steps: agreement.steps,
        control_steps,
        duration_s,
    };
    Ok(DriveOutcome { report, trajectory })
}

/// One row of an open-loop comparison: the oracle drives, the model predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowRow {
    pub frame_id: u64,
    pub speed_mph: f64,
    pub prediction: Prediction,
    pub oracle: ControlCommand,
}

/// Lets the oracle drive at 100 Hz and asks the model about the frame at
/// every 10 Hz tick, the same sampling as dataset synthesis.
pub fn shadow_compare(
    bundle: &ModelBundle,
    track: &TrackSpec,
    car: &CarParams,
    oracle_params: &OracleParams,
    n_steps: usize,
    seed: u64,
    camera: &CameraParams,
    mut on_frame: Option<&mut dyn FnMut(&ControlFrame)>,
) -> Result<Vec<ShadowRow>> {
    let oracle = Oracle::new(track, *car, *oracle_params);
    let size = bundle.model.config().input_size();
    let mut state = start_state(track);
    let mut rows = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let frame = render(track, &state, camera, size, derive_seed(seed, &format!("shadow/render/{k}")))?;
        let prediction = predict(bundle, &frame, state.speed_mph())?;
        let mut cmd = oracle.command(&state)?;
        rows.push(ShadowRow { frame_id: k as u64, speed_mph: state.speed_mph(), prediction: prediction.clone(), oracle: cmd });
        if let Some(f) = on_frame.as_mut() {
            f(&ControlFrame { frame_id: k as u64, frame, state, prediction: Some(prediction), applied: cmd, oracle: Some(cmd) });
        }
        for i in 0..PHYSICS_STEPS_PER_CONTROL {
            if i > 0 {
                cmd = oracle.command(&state)?;
            }
            state = step(&state, &cmd, car, PHYSICS_DT)?;
        }
    }
    Ok(rows)
}

/// Share of rows whose predicted acceleration class matches the oracle's.
pub fn shadow_accel_agreement(rows: &[ShadowRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|r| {
            AccelClass::from_pedals(r.prediction.command.throttle, r.prediction.command.brake)
                == AccelClass::from_pedals(r.oracle.throttle, r.oracle.brake)
        })
        .count();
    hits as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DrivingModel, ModelConfig};
    use crate::track::bundled_track;

    fn small_bundle() -> ModelBundle {
        let cfg = ModelConfig { stage_blocks: vec![1, 1, 1, 1], base_channels: 4, hidden_units: 8, ..Default::default() };
        ModelBundle::new(DrivingModel::new(cfg, 1).unwrap(), crate::dataset::Normalization { mean: 0.4, std: 0.2 })
    }

    #[test]
    fn coasting_from_rest_goes_nowhere() {
        let track = bundled_track("oval").unwrap();
        let cfg = DriveConfig { duration_s: 5.0, ..Default::default() };
        let out = drive(Driver::Fixed(ControlCommand::coast()), &track, &CarParams::default(), &OracleParams::default(), &cfg, None)
            .unwrap();
        assert_eq!(out.report.laps_completed, 0.0);
        assert_eq!(out.report.interventions, 0);
        assert_eq!(out.trajectory.len(), 50);
        assert!(out.trajectory.iter().all(|r| r.speed_mps == 0.0 && (r.x, r.y) == (out.trajectory[0].x, out.trajectory[0].y)));
        assert_eq!(out.report.duration_s, 5.0);
    }

    #[test]
    fn full_lock_leaves_the_track_and_gets_reset() {
        let track = bundled_track("oval").unwrap();
        let cfg = DriveConfig { duration_s: 40.0, ..Default::default() };
        let out = drive(
            Driver::Fixed(ControlCommand::new(180.0, 1.0, 0.0)),
            &track,
            &CarParams::default(),
            &OracleParams::default(),
            &cfg,
            None,
        )
        .unwrap();
        assert!(out.report.interventions >= 1);
        assert!(out.report.off_track_time_s > 0.0 && out.report.off_track_time_s <= out.report.duration_s);
        assert!((0.0..=1.0).contains(&out.report.accel_agreement));
    }

    #[test]
    fn untrained_model_decodes_valid_commands_and_is_deterministic() {
        let track = bundled_track("road_course").unwrap();
        let bundle = small_bundle();
        let cfg = DriveConfig { duration_s: 2.0, seed: 3, ..Default::default() };
        let mut frames = Vec::new();
        let mut sink = |f: &ControlFrame| frames.push((f.frame_id, f.applied));
        let a = drive(Driver::Model(&bundle), &track, &CarParams::default(), &OracleParams::default(), &cfg, Some(&mut sink))
            .unwrap();
        let b = drive(Driver::Model(&bundle), &track, &CarParams::default(), &OracleParams::default(), &cfg, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(frames.len(), 20);
        assert!(frames.windows(2).all(|w| w[1].0 == w[0].0 + 1));
        for (_, c) in frames {
            assert_eq!(c.throttle * c.brake, 0.0);
            assert!((-180.0..=180.0).contains(&c.steer_deg));
        }
    }

    #[test]
    fn prediction_probabilities_are_normalized() {
        let bundle = small_bundle();
        let frame = Frame::filled(64, 36, 100);
        let p = predict(&bundle, &frame, 20.0).unwrap();
        let steer = p.steer_probs.unwrap();
        assert_eq!(steer.len(), 36);
        assert!((steer.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!((p.accel_probs.unwrap().iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shadow_table_has_one_row_per_step() {
        let track = bundled_track("oval").unwrap();
        let rows = shadow_compare(&small_bundle(), &track, &CarParams::default(), &OracleParams::default(), 30, 1, &CameraParams::default(), None)
            .unwrap();
        assert_eq!(rows.len(), 30);
        assert!(rows.iter().all(|r| r.oracle.throttle * r.oracle.brake == 0.0));
        assert!((0.0..=1.0).contains(&shadow_accel_agreement(&rows)));
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = [TrajectoryRow { step: 0, x: 1.0, y: 2.0, heading: 0.5, speed_mps: 3.0, steer_deg: -4.0, throttle: 1.0, brake: 0.0, lateral_offset: 0.25 }];
        write_trajectory_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,1.0000,2.0000"));
    }
}
