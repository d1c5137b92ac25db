//! Websocket relay between producers (training, driving) and operator
//! consoles, with a shared pause/step/resume session.

mod protocol;
mod server;
mod session;

pub use protocol::{SessionState, VizCommand, VizMessage, WireCommand, PROTOCOL_VERSION};
pub use server::{resolve_static, Bridge, BridgeConfig, Publisher, CLIENT_QUEUE, HEARTBEAT_INTERVAL, PUBLISH_QUEUE};
pub use session::{Session, PAUSE_CACHE_CAPACITY};
