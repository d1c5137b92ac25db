use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender, TrySendError};
use tungstenite::{Message, WebSocket};

use super::protocol::{VizCommand, VizMessage};
use super::session::Session;
use crate::error::{Error, Result};
use crate::trainer::MetricsSnapshot;

/// Producer messages buffered before `publish` starts dropping.
pub const PUBLISH_QUEUE: usize = 1024;
/// Outgoing messages buffered per console before that console misses some.
pub const CLIENT_QUEUE: usize = 1024;
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(5);
/// How long a console thread waits for input before flushing its outbox.
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Default)]
pub struct BridgeConfig {
    /// Directory served over plain HTTP on the same port, for the console.
    pub ui_dir: Option<PathBuf>,
    pub heartbeat: Option<Duration>,
}

enum Event {
    Join(u64, Sender<Arc<str>>),
    Leave(u64),
    Command(VizCommand),
    Malformed(u64, String),
    Shutdown,
}

/// A running bridge. Dropping it shuts the bridge down.
pub struct Bridge {
    addr: SocketAddr,
    publish_tx: Option<Sender<VizMessage>>,
    events_tx: Sender<Event>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Bridge {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: impl Into<SocketAddr>, config: BridgeConfig) -> Result<Self> {
        let addr = addr.into();
        let listener = TcpListener::bind(addr).map_err(|e| Error::Bridge(format!("cannot listen on {addr}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Bridge(e.to_string()))?;
        listener.set_nonblocking(true).map_err(|e| Error::Bridge(e.to_string()))?;
        let (publish_tx, publish_rx) = bounded(PUBLISH_QUEUE);
        let (events_tx, events_rx) = unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let heartbeat = config.heartbeat.unwrap_or(HEARTBEAT_INTERVAL);
        let hub = std::thread::Builder::new()
            .name("bridge-hub".into())
            .spawn(move || hub(publish_rx, events_rx, heartbeat))
            .map_err(|e| Error::Bridge(e.to_string()))?;
        let accept = {
            let (events_tx, stop) = (events_tx.clone(), stop.clone());
            let ui_dir = config.ui_dir.clone();
            std::thread::Builder::new()
                .name("bridge-accept".into())
                .spawn(move || acceptor(listener, events_tx, stop, ui_dir))
                .map_err(|e| Error::Bridge(e.to_string()))?
        };
        Ok(Self { addr, publish_tx: Some(publish_tx), events_tx, stop, threads: vec![hub, accept] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Queues a message without blocking. Returns `Ok(false)` when the queue
    /// is full and the message was dropped.
    pub fn publish(&self, msg: VizMessage) -> Result<bool> {
        msg.validate()?;
        let tx = self.publish_tx.as_ref().ok_or_else(|| Error::Bridge("bridge is not running".into()))?;
        match tx.try_send(msg) {
            Ok(()) => Ok(true),
            Err(TrySendError::Full(_)) => Ok(false),
            Err(TrySendError::Disconnected(_)) => Err(Error::Bridge("bridge is not running".into())),
        }
    }

    pub fn publish_metrics(&self, snapshot: &MetricsSnapshot) -> Result<bool> {
        self.publish(VizMessage::train_progress(snapshot))
    }

    /// A cloneable non-blocking handle for producer threads.
    pub fn publisher(&self) -> Publisher {
        Publisher { tx: self.publish_tx.clone() }
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.publish_tx = None;
        let _ = self.events_tx.send(Event::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

#[derive(Debug, Clone)]
pub struct Publisher {
    tx: Option<Sender<VizMessage>>,
}

impl Publisher {
    pub fn publish(&self, msg: VizMessage) -> Result<bool> {
        msg.validate()?;
        let tx = self.tx.as_ref().ok_or_else(|| Error::Bridge("bridge is not running".into()))?;
        match tx.try_send(msg) {
            Ok(()) => Ok(true),
            Err(TrySendError::Full(_)) => Ok(false),
            Err(TrySendError::Disconnected(_)) => Err(Error::Bridge("bridge is not running".into())),
        }
    }
}

fn hub(publish_rx: Receiver<VizMessage>, events_rx: Receiver<Event>, heartbeat: Duration) {
    let mut session = Session::new();
    let mut clients: HashMap<u64, Sender<Arc<str>>> = HashMap::new();
    let mut next_beat = Instant::now() + heartbeat;
    let broadcast = |clients: &mut HashMap<u64, Sender<Arc<str>>>, msgs: Vec<VizMessage>| {
        for m in msgs {
            let text: Arc<str> = m.to_json().into();
            clients.retain(|_, tx| !matches!(tx.try_send(text.clone()), Err(TrySendError::Disconnected(_))));
        }
    };
    let mut publish_open = true;
    loop {
        let timeout = next_beat.saturating_duration_since(Instant::now());
        let never = crossbeam_channel::never();
        let publish = if publish_open { &publish_rx } else { &never };
        select! {
            recv(publish) -> msg => match msg {
                Ok(m) => {
                    let out = session.produce(m);
                    broadcast(&mut clients, out);
                }
                Err(_) => publish_open = false,
            },
            recv(events_rx) -> ev => match ev {
                Ok(Event::Join(id, tx)) => {
                    let _ = tx.try_send(VizMessage::hello().to_json().into());
                    let _ = tx.try_send(session.status(None).to_json().into());
                    clients.insert(id, tx);
                }
                Ok(Event::Leave(id)) => {
                    clients.remove(&id);
                }
                Ok(Event::Command(cmd)) => {
                    let out = session.command(cmd);
                    broadcast(&mut clients, out);
                }
                Ok(Event::Malformed(id, why)) => {
                    if let Some(tx) = clients.get(&id) {
                        let _ = tx.try_send(session.status(Some(why)).to_json().into());
                    }
                }
                Ok(Event::Shutdown) | Err(_) => return,
            },
            default(timeout) => {
                broadcast(&mut clients, vec![session.status(None)]);
                next_beat = Instant::now() + heartbeat;
            }
        }
    }
}

fn acceptor(listener: TcpListener, events: Sender<Event>, stop: Arc<AtomicBool>, ui_dir: Option<PathBuf>) {
    let ids = AtomicU64::new(0);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = ids.fetch_add(1, Ordering::SeqCst);
                let (events, stop, ui_dir) = (events.clone(), stop.clone(), ui_dir.clone());
                std::thread::spawn(move || {
                    let _ = connection(stream, id, events, stop, ui_dir.as_deref());
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(20)),
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Reads up to the end of the request headers without consuming them.
fn peek_headers(stream: &TcpStream) -> std::io::Result<String> {
    let mut buf = vec![0u8; 8192];
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let n = stream.peek(&mut buf)?;
        let text = String::from_utf8_lossy(&buf[..n]).into_owned();
        if text.contains("\r\n\r\n") || n == buf.len() || Instant::now() > deadline {
            return Ok(text);
        }
        if n == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn connection(stream: TcpStream, id: u64, events: Sender<Event>, stop: Arc<AtomicBool>, ui_dir: Option<&Path>) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let head = peek_headers(&stream)?;
    let is_ws = head.lines().any(|l| l.to_ascii_lowercase().starts_with("upgrade:") && l.to_ascii_lowercase().contains("websocket"));
    if !is_ws {
        return serve_static(stream, &head, ui_dir);
    }
    let Ok(mut ws) = tungstenite::accept(stream) else { return Ok(()) };
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let (tx, rx) = bounded::<Arc<str>>(CLIENT_QUEUE);
    if events.send(Event::Join(id, tx)).is_err() {
        return Ok(());
    }
    let result = console_loop(&mut ws, id, &events, &rx, &stop);
    let _ = events.send(Event::Leave(id));
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn console_loop(
    ws: &mut WebSocket<TcpStream>,
    id: u64,
    events: &Sender<Event>,
    outbox: &Receiver<Arc<str>>,
    stop: &AtomicBool,
) -> std::io::Result<()> {
    let to_io = |e: tungstenite::Error| std::io::Error::new(ErrorKind::Other, e);
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let ev = match VizCommand::parse(&text) {
                    Ok(cmd) => Event::Command(cmd),
                    Err(e) => Event::Malformed(id, e.to_string()),
                };
                if events.send(ev).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Binary(_)) => {
                let _ = events.send(Event::Malformed(id, "binary messages are not part of the protocol".into()));
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(to_io(e)),
        }
        let mut wrote = false;
        while let Ok(text) = outbox.try_recv() {
            ws.write(Message::Text(text.to_string())).map_err(to_io)?;
            wrote = true;
        }
        if wrote {
            match ws.flush() {
                Ok(()) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(to_io(e)),
            }
        }
    }
    Ok(())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") | Some("jsonl") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto `root`, refusing anything that climbs out of it.
pub fn resolve_static(root: &Path, request_path: &str) -> Option<PathBuf> {
    let path = request_path.split(['?', '#']).next().unwrap_or("/");
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut full = root.join(rel);
    if full.is_dir() {
        full = full.join("index.html");
    }
    full.is_file().then_some(full)
}

fn serve_static(mut stream: TcpStream, head: &str, ui_dir: Option<&Path>) -> std::io::Result<()> {
    // Consume the request so the peer sees an orderly close.
    let mut sink = vec![0u8; head.len()];
    let _ = stream.read_exact(&mut sink);
    let mut parts = head.lines().next().unwrap_or("").split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let found = match (method, ui_dir) {
        ("GET" | "HEAD", Some(root)) => resolve_static(root, target),
        _ => None,
    };
    let (status, ctype, body) = match found.and_then(|p| std::fs::read(&p).ok().map(|b| (p, b))) {
        Some((p, body)) => ("200 OK", content_type(&p), body),
        None => ("404 Not Found", "text/plain; charset=utf-8", b"not found\n".to_vec()),
    };
    write!(stream, "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len())?;
    if method != "HEAD" {
        stream.write_all(&body)?;
    }
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_paths_stay_inside_the_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.html"), "<html></html>").unwrap();
        std::fs::create_dir(dir.path().join("js")).unwrap();
        std::fs::write(dir.path().join("js/app.js"), "").unwrap();
        assert_eq!(resolve_static(dir.path(), "/"), Some(dir.path().join("index.html")));
        assert_eq!(resolve_static(dir.path(), "/js/app.js?v=2"), Some(dir.path().join("js/app.js")));
        assert_eq!(resolve_static(dir.path(), "/../etc/passwd"), None);
        assert_eq!(resolve_static(dir.path(), "/missing.css"), None);
        assert_eq!(content_type(Path::new("a.js")), "text/javascript; charset=utf-8");
    }

    #[test]
    fn port_in_use_is_an_error() {
        let a = Bridge::start(([127, 0, 0, 1], 0), BridgeConfig::default()).unwrap();
        let err = Bridge::start(a.local_addr(), BridgeConfig::default());
        assert!(matches!(err, Err(Error::Bridge(_))));
    }

    #[test]
    fn publish_without_clients_is_accepted_and_after_shutdown_fails() {
        let b = Bridge::start(([127, 0, 0, 1], 0), BridgeConfig::default()).unwrap();
        let p = b.publisher();
        assert!(b.publish(VizMessage::hello()).unwrap());
        b.shutdown();
        assert!(matches!(p.publish(VizMessage::hello()), Err(Error::Bridge(_))));
    }
}
