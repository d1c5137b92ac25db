//! Fixed-step kinematic bicycle with quadratic drag.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::{wrap_angle, Point, TrackSpec};

pub const MPH_PER_MPS: f64 = 2.236936;

/// Physics step: 100 Hz.
pub const PHYSICS_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    /// Radians, counterclockwise from +x, in (−π, π].
    pub heading: f64,
    /// m/s, never negative.
    pub speed: f64,
    pub sim_time: f64,
    pub step_count: u64,
}

impl CarState {
    pub fn at_rest(position: Point, heading: f64) -> Self {
        Self { x: position.x, y: position.y, heading: wrap_angle(heading), speed: 0.0, sim_time: 0.0, step_count: 0 }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn speed_mph(&self) -> f64 {
        self.speed * MPH_PER_MPS
    }
}

/// Driver inputs. Steering is the wheel angle in degrees, negative = left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer_deg: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlCommand {
    pub fn new(steer_deg: f64, throttle: f64, brake: f64) -> Self {
        Self { steer_deg: steer_deg.clamp(-180.0, 180.0), throttle: throttle.clamp(0.0, 1.0), brake: brake.clamp(0.0, 1.0) }
    }

    pub const fn coast() -> Self {
        Self { steer_deg: 0.0, throttle: 0.0, brake: 0.0 }
    }

    fn is_finite(&self) -> bool {
        self.steer_deg.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarParams {
    pub wheelbase: f64,
    /// Steering-wheel degrees per road-wheel degree.
    pub steer_ratio: f64,
    pub max_road_wheel_deg: f64,
    /// m/s² at full throttle.
    pub accel_gain: f64,
    /// m/s² at full brake.
    pub brake_gain: f64,
    pub drag_coeff: f64,
    pub rolling_coeff: f64,
    pub top_speed: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        let top_speed: f64 = 80.0;
        let accel_gain = 9.0;
        let rolling_coeff = 0.01;
        Self {
            wheelbase: 3.6,
            steer_ratio: 12.0,
            max_road_wheel_deg: 15.0,
            accel_gain,
            brake_gain: 18.0,
            drag_coeff: (accel_gain - rolling_coeff * top_speed) / (top_speed * top_speed),
            rolling_coeff,
            top_speed,
        }
    }
}

impl CarParams {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wheelbase", self.wheelbase),
            ("steer_ratio", self.steer_ratio),
            ("max_road_wheel_deg", self.max_road_wheel_deg),
            ("accel_gain", self.accel_gain),
            ("brake_gain", self.brake_gain),
            ("drag_coeff", self.drag_coeff),
            ("rolling_coeff", self.rolling_coeff),
            ("top_speed", self.top_speed),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("car {name} must be positive, got {v}")));
            }
        }
        let balance = self.drag_coeff * self.top_speed * self.top_speed + self.rolling_coeff * self.top_speed;
        if (balance - self.accel_gain).abs() > 0.01 * self.accel_gain {
            return Err(Error::InvalidParams(format!(
                "top_speed {} inconsistent with accel_gain {} (resistance at top speed is {balance:.3})",
                self.top_speed, self.accel_gain
            )));
        }
        Ok(())
    }

    /// Road-wheel angle in radians for a steering-wheel command; positive
    /// turns right.
    pub fn road_wheel_angle(&self, steer_deg: f64) -> f64 {
        (steer_deg / self.steer_ratio).clamp(-self.max_road_wheel_deg, self.max_road_wheel_deg).to_radians()
    }

    /// Steering-wheel degrees that produce the given road-wheel angle
    /// (radians, positive right).
    pub fn steer_for_road_wheel(&self, angle: f64) -> f64 {
        angle.to_degrees() * self.steer_ratio
    }
}

/// Advances the car by one step of `dt` seconds. Pure: equal inputs give
/// bit-identical outputs.
pub fn step(state: &CarState, command: &ControlCommand, params: &CarParams, dt: f64) -> Result<CarState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::NonFinite("dt"));
    }
    if !command.is_finite() {
        return Err(Error::NonFinite("command"));
    }
    if ![state.x, state.y, state.heading, state.speed].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let delta = params.road_wheel_angle(command.steer_deg);
    let heading = wrap_angle(state.heading - state.speed / params.wheelbase * delta.tan() * dt);
    let accel = params.accel_gain * command.throttle
        - params.brake_gain * command.brake
        - params.drag_coeff * state.speed * state.speed
        - params.rolling_coeff * state.speed;
    let speed = (state.speed + accel * dt).max(0.0);
    let (sin, cos) = heading.sin_cos();
    let step_count = state.step_count + 1;
    Ok(CarState {
        x: state.x + speed * cos * dt,
        y: state.y + speed * sin * dt,
        heading,
        speed,
        sim_time: step_count as f64 * dt,
        step_count,
    })
}

/// Places the car on the centerline at arc length `s`, facing along the
/// track, at rest. The simulation clock carries over.
pub fn reset_to_track(state: &CarState, track: &TrackSpec, s: f64) -> CarState {
    let k = track.sample_index_at(s);
    let p = track.sample(k);
    CarState { x: p.x, y: p.y, heading: wrap_angle(track.tangent(k)), speed: 0.0, ..*state }
}
