use std::collections::VecDeque;

use super::protocol::{SessionState, VizCommand, VizMessage, PROTOCOL_VERSION};

/// Eval frames held while paused; the oldest are dropped beyond this.
pub const PAUSE_CACHE_CAPACITY: usize = 256;

/// Pause/step/resume state shared by every connected console.
#[derive(Debug, Clone)]
pub struct Session {
    state: SessionState,
    cache: VecDeque<VizMessage>,
    next_frame_id: u64,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self { state: SessionState::Running, cache: VecDeque::new(), next_frame_id: 0 }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    pub fn status(&self, message: Option<String>) -> VizMessage {
        VizMessage::Status { state: self.state, cached: self.cache.len(), message }
    }

    /// Handles a produced message and returns what to broadcast now.
    /// Eval frames get the next frame id.
    pub fn produce(&mut self, mut msg: VizMessage) -> Vec<VizMessage> {
        if let VizMessage::EvalFrame { frame_id, .. } = &mut msg {
            *frame_id = self.next_frame_id;
            self.next_frame_id += 1;
            if self.state == SessionState::Paused {
                if self.cache.len() == PAUSE_CACHE_CAPACITY {
                    self.cache.pop_front();
                }
                self.cache.push_back(msg);
                return Vec::new();
            }
        }
        vec![msg]
    }

    /// Applies a console command and returns what to broadcast; the status
    /// acknowledgment comes last.
    pub fn command(&mut self, cmd: VizCommand) -> Vec<VizMessage> {
        match cmd {
            VizCommand::Hello { proto } if proto == PROTOCOL_VERSION => Vec::new(),
            VizCommand::Hello { proto } => {
                vec![self.status(Some(format!("protocol {proto} unsupported; server speaks {PROTOCOL_VERSION}")))]
            }
            VizCommand::Pause => {
                self.state = SessionState::Paused;
                vec![self.status(None)]
            }
            VizCommand::Step => {
                if self.state != SessionState::Paused {
                    return vec![self.status(Some("step ignored: not paused".into()))];
                }
                let mut out: Vec<VizMessage> = self.cache.pop_front().into_iter().collect();
                let note = out.is_empty().then(|| "step ignored: cache empty".to_string());
                out.push(self.status(note));
                out
            }
            VizCommand::Resume => {
                let mut out: Vec<VizMessage> = self.cache.drain(..).collect();
                self.state = SessionState::Running;
                out.push(self.status(None));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::protocol::WireCommand;
    use crate::render::Frame;
    use crate::vehicle::ControlCommand;

    fn frame() -> VizMessage {
        let c = WireCommand::from(&ControlCommand::coast());
        VizMessage::eval_frame(&Frame::filled(8, 8, 1), c.clone(), c, None)
    }

    fn progress() -> VizMessage {
        VizMessage::TrainProgress {
            step: 1,
            epoch: 1,
            train_loss: None,
            val_loss: None,
            accel_acc: 0.0,
            steer_acc: 0.0,
            steer_within20: 0.0,
        }
    }

    fn frame_ids(msgs: &[VizMessage]) -> Vec<u64> {
        msgs.iter()
            .filter_map(|m| match m {
                VizMessage::EvalFrame { frame_id, .. } => Some(*frame_id),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn pause_five_step_three() {
        let mut s = Session::new();
        s.command(VizCommand::Pause);
        for _ in 0..5 {
            assert!(s.produce(frame()).is_empty());
        }
        let mut got = Vec::new();
        for _ in 0..3 {
            got.extend(s.command(VizCommand::Step));
        }
        assert_eq!(frame_ids(&got), vec![0, 1, 2]);
        assert_eq!(s.cached(), 2);
    }

    #[test]
    fn resume_flushes_in_order_then_streams_live() {
        let mut s = Session::new();
        assert_eq!(frame_ids(&s.produce(frame())), vec![0]);
        s.command(VizCommand::Pause);
        s.produce(frame());
        s.produce(frame());
        let out = s.command(VizCommand::Resume);
        assert_eq!(frame_ids(&out), vec![1, 2]);
        assert!(matches!(out.last(), Some(VizMessage::Status { state: SessionState::Running, cached: 0, .. })));
        assert_eq!(frame_ids(&s.produce(frame())), vec![3]);
    }

    #[test]
    fn cache_keeps_the_latest_256() {
        let mut s = Session::new();
        s.command(VizCommand::Pause);
        for _ in 0..300 {
            s.produce(frame());
        }
        assert_eq!(s.cached(), PAUSE_CACHE_CAPACITY);
        let out = s.command(VizCommand::Resume);
        assert_eq!(frame_ids(&out), (44..300).collect::<Vec<_>>());
    }

    #[test]
    fn training_progress_bypasses_the_pause() {
        let mut s = Session::new();
        s.command(VizCommand::Pause);
        assert_eq!(s.produce(progress()), vec![progress()]);
    }

    #[test]
    fn step_when_running_or_empty_only_reports_status() {
        let mut s = Session::new();
        let out = s.command(VizCommand::Step);
        assert!(matches!(&out[..], [VizMessage::Status { message: Some(_), .. }]));
        s.command(VizCommand::Pause);
        let out = s.command(VizCommand::Step);
        assert!(matches!(&out[..], [VizMessage::Status { state: SessionState::Paused, message: Some(_), .. }]));
    }
}
