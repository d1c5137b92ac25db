use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::controller::{ControlFrame, Prediction};
use crate::error::{Error, Result};
use crate::render::Frame;
use crate::trainer::MetricsSnapshot;
use crate::vehicle::ControlCommand;

pub const PROTOCOL_VERSION: u32 = 1;

/// A command as shown on the console, with optional class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCommand {
    pub steer_deg: f64,
    pub throttle: f64,
    pub brake: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steer_probs: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accel_probs: Option<Vec<f32>>,
}

impl From<&ControlCommand> for WireCommand {
    fn from(c: &ControlCommand) -> Self {
        Self { steer_deg: c.steer_deg, throttle: c.throttle, brake: c.brake, steer_probs: None, accel_probs: None }
    }
}

impl From<&Prediction> for WireCommand {
    fn from(p: &Prediction) -> Self {
        Self { steer_probs: p.steer_probs.clone(), accel_probs: p.accel_probs.clone(), ..Self::from(&p.command) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Running,
    Paused,
}

/// Server-to-console messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VizMessage {
    Hello {
        proto: u32,
    },
    TrainProgress {
        step: usize,
        epoch: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_loss: Option<f64>,
        accel_acc: f64,
        steer_acc: f64,
        steer_within20: f64,
    },
    EvalFrame {
        frame_b64: String,
        w: usize,
        h: usize,
        pred: WireCommand,
        truth: WireCommand,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        saliency_b64: Option<String>,
        /// Assigned by the bridge when the frame is published.
        frame_id: u64,
    },
    Status {
        state: SessionState,
        cached: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

impl VizMessage {
    pub fn hello() -> Self {
        VizMessage::Hello { proto: PROTOCOL_VERSION }
    }

    pub fn train_progress(s: &MetricsSnapshot) -> Self {
        VizMessage::TrainProgress {
            step: s.step,
            epoch: s.epoch,
            train_loss: s.train_loss,
            val_loss: s.val_loss,
            accel_acc: s.accel_accuracy,
            steer_acc: s.steering_accuracy,
            steer_within20: s.steering_within_20deg,
        }
    }

    pub fn eval_frame(frame: &Frame, pred: WireCommand, truth: WireCommand, saliency: Option<&Frame>) -> Self {
        VizMessage::EvalFrame {
            frame_b64: B64.encode(&frame.pixels),
            w: frame.width,
            h: frame.height,
            pred,
            truth,
            saliency_b64: saliency.map(|s| B64.encode(&s.pixels)),
            frame_id: 0,
        }
    }

    /// Display message for a control step; the applied command stands in
    /// for the prediction when no model was consulted.
    pub fn from_control_frame(f: &ControlFrame, saliency: Option<&Frame>) -> Self {
        let pred = f.prediction.as_ref().map_or_else(|| WireCommand::from(&f.applied), WireCommand::from);
        let truth = WireCommand::from(f.oracle.as_ref().unwrap_or(&f.applied));
        Self::eval_frame(&f.frame, pred, truth, saliency)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    /// Checks that frame payloads decode to exactly w×h bytes.
    pub fn validate(&self) -> Result<()> {
        if let VizMessage::EvalFrame { frame_b64, w, h, saliency_b64, .. } = self {
            for (what, payload) in [("frame", Some(frame_b64)), ("saliency", saliency_b64.as_ref())] {
                let Some(p) = payload else { continue };
                let bytes = B64.decode(p).map_err(|e| Error::Bridge(format!("{what} payload is not base64: {e}")))?;
                if bytes.len() != w * h {
                    return Err(Error::Bridge(format!("{what} payload has {} bytes, expected {}x{}", bytes.len(), w, h)));
                }
            }
        }
        Ok(())
    }
}

/// Console-to-server messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VizCommand {
    Hello { proto: u32 },
    Pause,
    Step,
    Resume,
}

impl VizCommand {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Bridge(format!("unrecognized command {text:?}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn wire_field_names() {
        let s = MetricsSnapshot {
            step: 200,
            epoch: 2,
            train_loss: Some(1.5),
            val_loss: None,
            accel_accuracy: 0.75,
            steering_accuracy: 0.25,
            steering_within_20deg: 0.5,
        };
        let v: Value = serde_json::from_str(&VizMessage::train_progress(&s).to_json()).unwrap();
        assert_eq!(
            v,
            json!({"type":"train_progress","step":200,"epoch":2,"train_loss":1.5,"accel_acc":0.75,"steer_acc":0.25,"steer_within20":0.5})
        );
        assert_eq!(serde_json::to_value(VizMessage::hello()).unwrap(), json!({"type":"hello","proto":1}));
    }

    #[test]
    fn eval_frame_payload_is_raw_pixels() {
        let frame = Frame::filled(64, 36, 7);
        let cmd = ControlCommand::new(-15.0, 1.0, 0.0);
        let m = VizMessage::eval_frame(&frame, WireCommand::from(&cmd), WireCommand::from(&cmd), None);
        m.validate().unwrap();
        let v: Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["w"], 64);
        assert_eq!(v["pred"]["steer_deg"], -15.0);
        assert!(v.get("saliency_b64").is_none());
        let b = B64.decode(v["frame_b64"].as_str().unwrap()).unwrap();
        // 64x36 is 2,304 raw bytes, 3,072 base64 characters.
        assert_eq!(b.len(), 2304);
        assert_eq!(v["frame_b64"].as_str().unwrap().len(), 3072);
    }

    #[test]
    fn short_payload_fails_validation() {
        let mut m = VizMessage::eval_frame(&Frame::filled(64, 36, 7), WireCommand::from(&ControlCommand::coast()), WireCommand::from(&ControlCommand::coast()), None);
        if let VizMessage::EvalFrame { frame_b64, .. } = &mut m {
            *frame_b64 = B64.encode(vec![0u8; 2300]);
        }
        assert!(m.validate().is_err());
    }

    #[test]
    fn commands_parse_and_unknown_types_fail() {
        assert_eq!(VizCommand::parse(r#"{"type":"pause"}"#).unwrap(), VizCommand::Pause);
        assert_eq!(VizCommand::parse(r#"{"type":"step"}"#).unwrap(), VizCommand::Step);
        assert_eq!(VizCommand::parse(r#"{"type":"resume"}"#).unwrap(), VizCommand::Resume);
        assert_eq!(VizCommand::parse(r#"{"type":"hello","proto":1}"#).unwrap(), VizCommand::Hello { proto: 1 });
        assert!(VizCommand::parse(r#"{"type":"rewind"}"#).is_err());
        assert!(VizCommand::parse("not json").is_err());
    }
}
