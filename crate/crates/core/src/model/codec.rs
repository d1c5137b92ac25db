//! Label codecs: the (−100, 100) regression rescale and the
//! 36-bucket steering / 3-class acceleration classification targets.

use serde::{Deserialize, Serialize};

use crate::vehicle::ControlCommand;

pub const STEERING_CLASSES: usize = 36;
pub const ACCEL_CLASSES: usize = 3;
pub const STEERING_BUCKET_DEG: f64 = 10.0;

/// Steering bucket for a wheel angle: ten-degree bins over [−180, 180], with
/// +180 folded into the last bucket.
pub fn steering_bucket(steer_deg: f64) -> usize {
    let b = ((steer_deg + 180.0) / STEERING_BUCKET_DEG).floor();
    b.clamp(0.0, (STEERING_CLASSES - 1) as f64) as usize
}

pub fn bucket_center(bucket: usize) -> f64 {
    -180.0 + STEERING_BUCKET_DEG * (bucket as f64 + 0.5)
}

/// Bucket index of the mirrored steering angle.
pub const fn mirrored_bucket(bucket: usize) -> usize {
    STEERING_CLASSES - 1 - bucket
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelClass {
    Throttle = 0,
    Brake = 1,
    Neutral = 2,
}

impl AccelClass {
    pub const ALL: [AccelClass; ACCEL_CLASSES] = [AccelClass::Throttle, AccelClass::Brake, AccelClass::Neutral];

    /// Brake wins when both pedals are pressed.
    pub fn from_pedals(throttle: f64, brake: f64) -> Self {
        if brake >= 0.5 {
            AccelClass::Brake
        } else if throttle >= 0.5 {
            AccelClass::Throttle
        } else {
            AccelClass::Neutral
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// (throttle, brake)
    pub fn pedals(self) -> (f64, f64) {
        match self {
            AccelClass::Throttle => (1.0, 0.0),
            AccelClass::Brake => (0.0, 1.0),
            AccelClass::Neutral => (0.0, 0.0),
        }
    }
}

/// How regression targets are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTargets {
    /// Every output mapped onto (−100, 100).
    #[default]
    Rescaled,
    /// Every output mapped onto [0, 1].
    Unit,
}

impl RegressionTargets {
    pub fn encode(self, cmd: &ControlCommand) -> [f64; 3] {
        match self {
            RegressionTargets::Rescaled => [cmd.steer_deg * (100.0 / 180.0), cmd.throttle * 200.0 - 100.0, cmd.brake * 200.0 - 100.0],
            RegressionTargets::Unit => [(cmd.steer_deg + 180.0) / 360.0, cmd.throttle, cmd.brake],
        }
    }

    pub fn decode(self, v: [f64; 3]) -> ControlCommand {
        match self {
            RegressionTargets::Rescaled => {
                ControlCommand::new(v[0] * (180.0 / 100.0), (v[1] + 100.0) / 200.0, (v[2] + 100.0) / 200.0)
            }
            RegressionTargets::Unit => ControlCommand::new(v[0] * 360.0 - 180.0, v[1], v[2]),
        }
    }

    /// Factor converting a squared error in these units into rescaled units.
    pub fn squared_error_to_rescaled(self) -> f64 {
        match self {
            RegressionTargets::Rescaled => 1.0,
            RegressionTargets::Unit => 200.0 * 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetEncoding {
    Regression([f64; 3]),
    Classification { steering_bucket: usize, accel: AccelClass },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Regression,
    Classification,
}

pub fn encode_targets(label: &ControlCommand, mode: ModelMode, scale: RegressionTargets) -> TargetEncoding {
    match mode {
        ModelMode::Regression => TargetEncoding::Regression(scale.encode(label)),
        ModelMode::Classification => TargetEncoding::Classification {
            steering_bucket: steering_bucket(label.steer_deg),
            accel: AccelClass::from_pedals(label.throttle, label.brake),
        },
    }
}

pub fn decode_targets(enc: &TargetEncoding, scale: RegressionTargets) -> ControlCommand {
    match *enc {
        TargetEncoding::Regression(v) => scale.decode(v),
        TargetEncoding::Classification { steering_bucket, accel } => {
            let (throttle, brake) = accel.pedals();
            ControlCommand::new(bucket_center(steering_bucket), throttle, brake)
        }
    }
}
