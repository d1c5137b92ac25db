//! Deterministic expert driver: pure-pursuit steering toward a point on the
//! centerline and bang-bang throttle/brake against a curvature speed limit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::{wrap_angle, TrackSpec};
use crate::vehicle::{step, CarParams, CarState, ControlCommand, PHYSICS_DT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    /// Lookahead distance per m/s of speed (seconds).
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub lookahead_max: f64,
    /// m/s².
    pub lat_accel_max: f64,
    /// Meters of track ahead considered when planning braking.
    pub brake_horizon: f64,
    /// m/s.
    pub speed_hysteresis: f64,
    pub steer_clip: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            lookahead_gain: 0.5,
            lookahead_min: 8.0,
            lookahead_max: 60.0,
            lat_accel_max: 25.0,
            brake_horizon: 250.0,
            speed_hysteresis: 0.5,
            steer_clip: 180.0,
        }
    }
}

impl OracleParams {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lookahead_gain", self.lookahead_gain),
            ("lookahead_min", self.lookahead_min),
            ("lookahead_max", self.lookahead_max),
            ("lat_accel_max", self.lat_accel_max),
            ("brake_horizon", self.brake_horizon),
            ("speed_hysteresis", self.speed_hysteresis),
            ("steer_clip", self.steer_clip),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("oracle {name} must be positive, got {v}")));
            }
        }
        if self.lookahead_min > self.lookahead_max {
            return Err(Error::InvalidParams("oracle lookahead_min exceeds lookahead_max".into()));
        }
        Ok(())
    }
}

/// Oracle bound to one track and car, with the per-sample curvature speed
/// limits precomputed.
#[derive(Debug, Clone)]
pub struct Oracle<'a> {
    track: &'a TrackSpec,
    car: CarParams,
    params: OracleParams,
    corner_limit: Vec<f64>,
}

impl<'a> Oracle<'a> {
    pub fn new(track: &'a TrackSpec, car: CarParams, params: OracleParams) -> Self {
        let corner_limit = track
            .curvature()
            .iter()
            .map(|k| car.top_speed.min((params.lat_accel_max / k.abs().max(1e-6)).sqrt()))
            .collect();
        Self { track, car, params, corner_limit }
    }

    pub fn track(&self) -> &TrackSpec {
        self.track
    }

    pub fn car(&self) -> &CarParams {
        &self.car
    }

    /// Target speed at the sample nearest the car: the lowest corner limit
    /// within the braking horizon, relaxed by the distance available to brake.
    pub fn target_speed(&self, sample: usize) -> f64 {
        let n = self.corner_limit.len();
        let ds = self.track.ds();
        let steps = (self.params.brake_horizon / ds).floor() as usize;
        let mut best = f64::INFINITY;
        for j in 0..=steps {
            let limit = self.corner_limit[(sample + j) % n];
            let d = j as f64 * ds;
            let v = (limit * limit + 2.0 * self.car.brake_gain * d).sqrt();
            best = best.min(v);
        }
        best
    }

    pub fn command(&self, state: &CarState) -> Result<ControlCommand> {
        let pos = state.position();
        let loc = self.track.locate(pos);
        let limit = 2.0 * self.track.width;
        if loc.lateral_offset.abs() > limit {
            return Err(Error::OffTrack { offset: loc.lateral_offset.abs(), limit });
        }

        let p = &self.params;
        let lookahead = (p.lookahead_gain * state.speed).clamp(p.lookahead_min, p.lookahead_max);
        let target = self.track.lookahead_point(loc.s, lookahead);
        let to_target = target - pos;
        let bearing = wrap_angle(to_target.y.atan2(to_target.x) - state.heading);
        // Positive bearing = target on the left; left is negative steering.
        let road_wheel_left = (2.0 * self.car.wheelbase * bearing.sin() / lookahead).atan();
        let steer_deg = self.car.steer_for_road_wheel(-road_wheel_left).clamp(-p.steer_clip, p.steer_clip);

        let v_target = self.target_speed(loc.sample);
        let (throttle, brake) = if state.speed > v_target + p.speed_hysteresis {
            (0.0, 1.0)
        } else if state.speed < v_target - p.speed_hysteresis {
            (1.0, 0.0)
        } else {
            (0.0, 0.0)
        };
        Ok(ControlCommand::new(steer_deg, throttle, brake))
    }
}

pub fn oracle_command(track: &TrackSpec, state: &CarState, car: &CarParams, params: &OracleParams) -> Result<ControlCommand> {
    Oracle::new(track, *car, *params).command(state)
}

/// Accumulates signed arc-length progress around a closed track.
#[derive(Debug, Clone, Copy)]
pub struct LapCounter {
    total_length: f64,
    last_s: f64,
    progress: f64,
}

impl LapCounter {
    pub fn new(track: &TrackSpec, start_s: f64) -> Self {
        Self { total_length: track.total_length(), last_s: start_s, progress: 0.0 }
    }

    pub fn update(&mut self, s: f64) {
        let half = self.total_length / 2.0;
        let mut delta = s - self.last_s;
        if delta > half {
            delta -= self.total_length;
        } else if delta < -half {
            delta += self.total_length;
        }
        self.progress += delta;
        self.last_s = s;
    }

    /// Moves the reference point without counting progress (used after a reset).
    pub fn rebase(&mut self, s: f64) {
        self.last_s = s;
    }

    pub fn laps(&self) -> f64 {
        self.progress / self.total_length
    }
}

pub const DEFAULT_LAP_STEP_BUDGET: u64 = 60_000;

/// Drives one lap from rest at s = 0, returning every 100 Hz (state, command)
/// pair; the state is the one the command was computed from.
pub fn run_oracle_lap(
    track: &TrackSpec,
    car: &CarParams,
    params: &OracleParams,
    step_budget: u64,
) -> Result<Vec<(CarState, ControlCommand)>> {
    let oracle = Oracle::new(track, *car, *params);
    let mut state = crate::vehicle::reset_to_track(&CarState::at_rest(track.sample(0), 0.0), track, 0.0);
    let mut laps = LapCounter::new(track, 0.0);
    let mut out = Vec::new();
    for _ in 0..step_budget {
        let cmd = oracle.command(&state)?;
        out.push((state, cmd));
        state = step(&state, &cmd, car, PHYSICS_DT)?;
        laps.update(track.locate(state.position()).s);
        if laps.laps() >= 1.0 {
            return Ok(out);
        }
    }
    Err(Error::StepBudgetExhausted(step_budget))
}
