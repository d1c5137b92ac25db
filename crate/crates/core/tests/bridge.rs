use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use ignition::bridge::{Bridge, BridgeConfig, SessionState, VizMessage, WireCommand};
use ignition::render::Frame;
use ignition::trainer::MetricsSnapshot;
use ignition::vehicle::ControlCommand;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn start(ui_dir: Option<std::path::PathBuf>) -> Bridge {
    let cfg = BridgeConfig { ui_dir, heartbeat: Some(Duration::from_secs(3600)) };
    Bridge::start(SocketAddr::from(([127, 0, 0, 1], 0)), cfg).unwrap()
}

fn connect(addr: SocketAddr) -> Client {
    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}/ws")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    }
    // Joining is complete once the greeting and the initial status arrive.
    assert!(matches!(recv(&mut ws), VizMessage::Hello { proto: 1 }));
    assert!(matches!(recv(&mut ws), VizMessage::Status { state: SessionState::Running, .. }));
    ws
}

fn recv(ws: &mut Client) -> VizMessage {
    loop {
        match ws.read().expect("message before timeout") {
            Message::Text(t) => {
                let m: VizMessage = serde_json::from_str(&t).unwrap();
                m.validate().unwrap();
                return m;
            }
            Message::Ping(_) | Message::Pong(_) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}

fn send(ws: &mut Client, text: &str) {
    ws.send(Message::Text(text.to_string())).unwrap();
}

fn frame(tag: u8) -> VizMessage {
    let c = WireCommand::from(&ControlCommand::new(-10.0, 1.0, 0.0));
    VizMessage::eval_frame(&Frame::filled(64, 36, tag), c.clone(), c, None)
}

fn frame_id(m: &VizMessage) -> Option<u64> {
    match m {
        VizMessage::EvalFrame { frame_id, .. } => Some(*frame_id),
        _ => None,
    }
}

/// Reads until a status arrives, returning the eval frame ids seen before it.
fn frames_until_status(ws: &mut Client) -> (Vec<u64>, VizMessage) {
    let mut ids = Vec::new();
    loop {
        let m = recv(ws);
        match frame_id(&m) {
            Some(id) => ids.push(id),
            None if matches!(m, VizMessage::Status { .. }) => return (ids, m),
            None => {}
        }
    }
}

#[test]
fn pause_step_resume_over_the_wire() {
    let bridge = start(None);
    let mut ws = connect(bridge.local_addr());
    send(&mut ws, r#"{"type":"hello","proto":1}"#);
    send(&mut ws, r#"{"type":"pause"}"#);
    let (ids, status) = frames_until_status(&mut ws);
    assert!(ids.is_empty());
    assert!(matches!(status, VizMessage::Status { state: SessionState::Paused, cached: 0, .. }));

    for k in 0..5 {
        assert!(bridge.publish(frame(k)).unwrap());
    }
    let mut stepped = Vec::new();
    for _ in 0..3 {
        send(&mut ws, r#"{"type":"step"}"#);
        let (ids, _) = frames_until_status(&mut ws);
        stepped.extend(ids);
    }
    assert_eq!(stepped, vec![0, 1, 2], "each step releases exactly one cached frame, in order");

    send(&mut ws, r#"{"type":"resume"}"#);
    let (rest, status) = frames_until_status(&mut ws);
    assert_eq!(rest, vec![3, 4]);
    assert!(matches!(status, VizMessage::Status { state: SessionState::Running, cached: 0, .. }));

    bridge.publish(frame(9)).unwrap();
    assert_eq!(frame_id(&recv(&mut ws)), Some(5));
    bridge.shutdown();
}

#[test]
fn malformed_commands_get_a_status_and_keep_the_connection() {
    let bridge = start(None);
    let mut ws = connect(bridge.local_addr());
    send(&mut ws, r#"{"type":"rewind"}"#);
    match recv(&mut ws) {
        VizMessage::Status { message: Some(m), .. } => assert!(m.contains("rewind"), "{m}"),
        other => panic!("expected an error status, got {other:?}"),
    }
    ws.send(Message::Binary(vec![1, 2, 3])).unwrap();
    assert!(matches!(recv(&mut ws), VizMessage::Status { message: Some(_), .. }));
    bridge.publish(frame(1)).unwrap();
    assert_eq!(frame_id(&recv(&mut ws)), Some(0));
    bridge.shutdown();
}

#[test]
fn training_progress_is_not_held_by_a_pause() {
    let bridge = start(None);
    let mut ws = connect(bridge.local_addr());
    send(&mut ws, r#"{"type":"pause"}"#);
    frames_until_status(&mut ws);
    bridge.publish(frame(0)).unwrap();
    let snap = MetricsSnapshot {
        step: 200,
        epoch: 2,
        train_loss: Some(2.5),
        val_loss: Some(2.4),
        accel_accuracy: 0.8,
        steering_accuracy: 0.4,
        steering_within_20deg: 0.7,
    };
    bridge.publish_metrics(&snap).unwrap();
    assert_eq!(recv(&mut ws), VizMessage::train_progress(&snap));
    bridge.shutdown();
}

#[test]
fn every_console_sees_the_same_stream() {
    let bridge = start(None);
    let mut a = connect(bridge.local_addr());
    let mut b = connect(bridge.local_addr());
    for k in 0..3 {
        bridge.publish(frame(k)).unwrap();
    }
    for ws in [&mut a, &mut b] {
        let ids: Vec<_> = (0..3).map(|_| frame_id(&recv(ws)).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }
    bridge.shutdown();
}

/// Per-publish latencies for a sustained 1 kHz stream, sorted.
fn paced_publish_latencies(bridge: &Bridge, n: usize) -> Vec<Duration> {
    let msg = frame(3);
    let start = Instant::now();
    let mut lat = Vec::with_capacity(n);
    for k in 0..n {
        let due = start + Duration::from_millis(k as u64);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let t = Instant::now();
        let _ = bridge.publish(msg.clone()).unwrap();
        lat.push(t.elapsed());
    }
    lat.sort();
    lat
}

#[test]
fn publishing_does_not_wait_for_a_slow_console() {
    let bridge = start(None);
    // Connected but never reads, so its socket and outbox fill up.
    let _stalled = connect(bridge.local_addr());
    let mut live = connect(bridge.local_addr());
    let lat = paced_publish_latencies(&bridge, 2000);
    let p99 = lat[lat.len() * 99 / 100];
    // The tail beyond p99 is scheduler noise on a shared core, not the bridge.
    assert!(p99 < Duration::from_millis(1), "p99 publish latency {p99:?}");
    assert!(lat[lat.len() / 2] < Duration::from_micros(100), "median {:?}", lat[lat.len() / 2]);
    // The reading console is not held back by the stalled one.
    let mut seen = 0;
    while seen < 1000 {
        if frame_id(&recv(&mut live)).is_some() {
            seen += 1;
        }
    }
    bridge.shutdown();
}

#[test]
fn publish_after_shutdown_is_an_error() {
    let bridge = start(None);
    let publisher = bridge.publisher();
    bridge.shutdown();
    assert!(publisher.publish(frame(0)).is_err());
}

fn http_get(addr: SocketAddr, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serves_the_console_files_on_the_same_port() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<title>console</title>").unwrap();
    std::fs::write(ui.path().join("app.js"), "console.log(1)").unwrap();
    let bridge = start(Some(ui.path().to_path_buf()));
    let addr = bridge.local_addr();

    let index = http_get(addr, "/");
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("text/html"));
    assert!(index.ends_with("<title>console</title>"));
    let js = http_get(addr, "/app.js?v=2");
    assert!(js.contains("text/javascript") && js.ends_with("console.log(1)"));
    assert!(http_get(addr, "/missing.css").starts_with("HTTP/1.1 404"));
    assert!(http_get(addr, "/../Cargo.toml").starts_with("HTTP/1.1 404"));

    // The websocket still works alongside.
    let mut ws = connect(addr);
    bridge.publish(frame(0)).unwrap();
    assert_eq!(frame_id(&recv(&mut ws)), Some(0));
    bridge.shutdown();
}
