//! WebSocket bridge between a live session and an operator console.
//!
//! Every message is a JSON object with `"v": 1` and a `"type"` tag.
//!
//! Client → server:
//!
//! | type     | fields                                                     |
//! |----------|------------------------------------------------------------|
//! | `input`  | `delta: {translation: [m; 3], rotation: [rad; 3]}`, optional `buttons: {clutch, hold}`, optional client time `t_ms` |
//! | `clutch` | `pressed: bool`                                            |
//! | `hold`   | `pressed: bool`                                            |
//!
//! `delta` moves the virtual phone in its world frame; `rotation` is a
//! rotation vector applied on the left.
//!
//! Server → client: `{ "v": 1, "type": ..., "t": session seconds, "payload": ... }`
//! with type `hello`, `robot`, `wrench`, `haptic`, `metrics` or `cloud`.
//! Render state is published at most at [`MAX_PUBLISH_HZ`]; haptic events
//! are forwarded at the next publish instant.
//!
//! A disconnecting client stops the command stream, so the follower
//! watchdog releases the clutch once the gap exceeds 100 ms.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::depthcodec::{decode_bytes, deproject};
use crate::geometry::{rot_exp, Transform};
use crate::haptics::HapticEvent;
use crate::leader::{UiInputState, UiSource};
use crate::session::{Session, SessionConfig, SessionError, SessionLog};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_PUBLISH_HZ: f64 = 15.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buttons {
    pub clutch: bool,
    pub hold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ClientMsg {
    Input {
        #[serde(default)]
        delta: PoseDelta,
        #[serde(default)]
        buttons: Option<Buttons>,
        #[serde(default)]
        t_ms: Option<f64>,
    },
    Clutch {
        pressed: bool,
    },
    Hold {
        pressed: bool,
    },
}

#[derive(Debug, Deserialize)]
struct Envelope {
    v: u32,
    #[serde(flatten)]
    msg: ClientMsg,
}

/// Parses one client message and checks the protocol version.
pub fn parse_client(text: &str) -> Result<ClientMsg, String> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if env.v != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {}", env.v));
    }
    Ok(env.msg)
}

/// Serializes a client message with the version field.
pub fn client_json(msg: &ClientMsg) -> String {
    let mut v = serde_json::to_value(msg).expect("client message serializes");
    v["v"] = json!(PROTOCOL_VERSION);
    v.to_string()
}

/// Applies a client message to the shared leader input.
pub fn apply_client(state: &mut UiInputState, msg: &ClientMsg) {
    match msg {
        ClientMsg::Input { delta, buttons, .. } => {
            let rot = rot_exp(&Vector3::from(delta.rotation));
            state.pose = Transform::new(
                rot * state.pose.rotation,
                state.pose.translation + Vector3::from(delta.translation),
            );
            if let Some(b) = buttons {
                state.clutch = b.clutch;
                state.hold = b.hold;
            }
        }
        ClientMsg::Clutch { pressed } => state.clutch = *pressed,
        ClientMsg::Hold { pressed } => state.hold = *pressed,
    }
}

pub fn server_json(kind: &str, t: f64, payload: Value) -> String {
    json!({ "v": PROTOCOL_VERSION, "type": kind, "t": t, "payload": payload }).to_string()
}

#[derive(Clone, Debug)]
pub struct BridgeOptions {
    /// Render-state publish rate, capped at [`MAX_PUBLISH_HZ`].
    pub publish_hz: f64,
    /// Simulated seconds per wall second.
    pub pace: f64,
    /// One camera cloud every this many publishes.
    pub cloud_every: u32,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        BridgeOptions {
            publish_hz: MAX_PUBLISH_HZ,
            pace: 1.0,
            cloud_every: 5,
        }
    }
}

struct Shared {
    input: Arc<Mutex<UiInputState>>,
    outbox: Mutex<VecDeque<String>>,
    stop: AtomicBool,
}

/// Runs a live session on the wall clock, serving one client at a time on
/// `listener`, until the configured duration elapses or `stop` is set.
pub fn serve(
    cfg: SessionConfig,
    listener: TcpListener,
    opts: BridgeOptions,
    stop: Arc<AtomicBool>,
) -> Result<SessionLog, SessionError> {
    if !(opts.pace > 0.0 && opts.publish_hz > 0.0) {
        return Err(SessionError::Config("bridge pace and publish rate must be positive".into()));
    }
    let source = UiSource::new();
    let shared = Arc::new(Shared {
        input: source.handle(),
        outbox: Mutex::new(VecDeque::new()),
        stop: AtomicBool::new(false),
    });
    let mut session = Session::with_source(cfg, Box::new(source), 0.0)?;
    session.keep_latest_depth(true);
    listener.set_nonblocking(true)?;
    let acceptor = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || accept_loop(listener, shared))
    };

    let publish_period_us = (1e6 / opts.publish_hz.min(MAX_PUBLISH_HZ)).ceil() as u64;
    let start = Instant::now();
    let mut connected = false;
    let mut publishes = 0u32;
    let mut haptics: Vec<HapticEvent> = Vec::new();
    let mut next_cloud_camera = 0usize;
    let mut next_publish_us = 0u64;
    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let now_connected = shared.input.lock().map(|s| s.connected).unwrap_or(false);
        if now_connected != connected {
            connected = now_connected;
            session.note_ui(connected);
        }
        if !session.step() {
            break;
        }
        haptics.extend(session.take_haptics());
        let now = session.now_us();
        let due = now >= next_publish_us;
        if due {
            next_publish_us = now + publish_period_us;
        }
        if due && connected {
            publishes += 1;
            let mut out = render_messages(&session, &mut haptics);
            if opts.cloud_every > 0 && publishes.is_multiple_of(opts.cloud_every) && session.camera_count() > 0 {
                if let Some(msg) = cloud_message(&session, next_cloud_camera) {
                    out.push(msg);
                }
                next_cloud_camera = (next_cloud_camera + 1) % session.camera_count();
            }
            if let Ok(mut q) = shared.outbox.lock() {
                q.extend(out);
            }
        }
        // Pace the virtual clock against the wall clock.
        let target = Duration::from_secs_f64(now as f64 * 1e-6 / opts.pace);
        let elapsed = start.elapsed();
        if target > elapsed {
            thread::sleep(target - elapsed);
        }
    }
    shared.stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    Ok(session.into_log())
}

fn render_messages(session: &Session, haptics: &mut Vec<HapticEvent>) -> Vec<String> {
    let snap = session.snapshot();
    let mut out = vec![
        server_json(
            "robot",
            snap.t,
            json!({
                "q": snap.q,
                "tool": snap.tool,
                "desired": snap.desired,
                "engaged": snap.engaged,
                "watchdog_tripped": snap.watchdog_tripped,
            }),
        ),
        server_json(
            "wrench",
            snap.t,
            json!({ "force": snap.wrench.force, "torque": snap.wrench.torque, "in_contact": snap.in_contact }),
        ),
    ];
    for ev in haptics.drain(..) {
        out.push(server_json("haptic", snap.t, serde_json::to_value(ev).expect("event serializes")));
    }
    out.push(server_json(
        "metrics",
        snap.t,
        json!({ "rtt": session.rtt_summary() }),
    ));
    out
}

/// Base-frame point cloud of one camera's newest frame, millimeters.
fn cloud_message(session: &Session, camera: usize) -> Option<String> {
    let bytes = session.latest_depth(camera)?;
    let frame = decode_bytes(bytes).ok()?;
    let cams = &session.config().cameras;
    let pts = deproject(&frame, &cams.intrinsics(), &cams.extrinsic(camera), cams.cloud_stride);
    let flat: Vec<i32> = pts
        .iter()
        .flat_map(|p| [p.x, p.y, p.z])
        .map(|v| (v * 1e3).round() as i32)
        .collect();
    let t = session.now_us() as f64 * 1e-6;
    Some(server_json(
        "cloud",
        t,
        json!({ "camera": camera, "stride": cams.cloud_stride, "points_mm": flat }),
    ))
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, addr)) => {
                log::info!("ui client {addr} connected");
                if let Err(e) = handle_client(stream, &shared) {
                    log::warn!("ui client {addr}: {e}");
                }
                if let Ok(mut s) = shared.input.lock() {
                    s.connected = false;
                }
                log::info!("ui client {addr} disconnected");
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_client(stream: TcpStream, shared: &Shared) -> Result<(), Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream)?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    if let Ok(mut q) = shared.outbox.lock() {
        q.clear();
    }
    if let Ok(mut s) = shared.input.lock() {
        s.connected = true;
    }
    ws.send(Message::text(server_json("hello", 0.0, json!({ "protocol": PROTOCOL_VERSION }))))?;
    while !shared.stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => match parse_client(text.as_str()) {
                Ok(msg) => {
                    if let Ok(mut s) = shared.input.lock() {
                        apply_client(&mut s, &msg);
                    }
                }
                Err(e) => log::warn!("ignoring client message: {e}"),
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let pending: Vec<String> = shared.outbox.lock().map(|mut q| q.drain(..).collect()).unwrap_or_default();
        for text in pending {
            ws.send(Message::text(text))?;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
