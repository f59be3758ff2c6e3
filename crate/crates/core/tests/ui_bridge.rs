use std::net::{TcpListener, TcpStream};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde_json::Value;
use teleop_core::geometry::Transform;
use teleop_core::session::{LeaderConfig, Record, SessionConfig, SessionLog};
use teleop_core::ui_bridge::{client_json, serve, BridgeOptions, ClientMsg, PoseDelta};
use tungstenite::{Message, WebSocket};

fn ui_config(duration: f64) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.leader = LeaderConfig::Ui;
    cfg.duration = duration;
    cfg.channel.profile = "ideal".into();
    cfg.cameras.count = 1;
    cfg
}

fn start(cfg: SessionConfig) -> (String, thread::JoinHandle<SessionLog>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let h = thread::spawn(move || serve(cfg, listener, BridgeOptions::default(), stop).unwrap());
    (format!("ws://{addr}/"), h)
}

fn connect(url: &str) -> WebSocket<TcpStream> {
    let addr = url.trim_start_matches("ws://").trim_end_matches('/');
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        if let Ok(stream) = TcpStream::connect(addr) {
            let (ws, _) = tungstenite::client(url, stream).unwrap();
            return ws;
        }
        assert!(Instant::now() < deadline, "bridge did not come up");
        thread::sleep(Duration::from_millis(10));
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: ClientMsg) {
    ws.send(Message::text(client_json(&msg))).unwrap();
}

fn next_json(ws: &mut WebSocket<TcpStream>) -> Value {
    loop {
        if let Message::Text(t) = ws.read().unwrap() {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

fn drag(ws: &mut WebSocket<TcpStream>, total: Vector3<f64>, steps: usize) {
    for _ in 0..steps {
        let d = total / steps as f64;
        send(
            ws,
            ClientMsg::Input {
                delta: PoseDelta {
                    translation: [d.x, d.y, d.z],
                    rotation: [0.0; 3],
                },
                buttons: None,
                t_ms: None,
            },
        );
        thread::sleep(Duration::from_millis(10));
    }
}

fn home(log: &SessionLog) -> Transform {
    match &log.records[0] {
        Record::Header { home, .. } => *home,
        r => panic!("log starts with {r:?}"),
    }
}

fn last_state(log: &SessionLog) -> (Transform, Transform, bool) {
    log.records
        .iter()
        .rev()
        .find_map(|r| match r {
            Record::State {
                desired, actual, engaged, ..
            } => Some((*desired, *actual, *engaged)),
            _ => None,
        })
        .unwrap()
}

#[test]
fn drag_moves_desired_pose_by_the_phone_delta() {
    let (url, h) = start(ui_config(2.0));
    let mut ws = connect(&url);
    assert_eq!(next_json(&mut ws)["type"], "hello");
    thread::sleep(Duration::from_millis(100));
    send(&mut ws, ClientMsg::Clutch { pressed: true });
    thread::sleep(Duration::from_millis(100));
    let delta = Vector3::new(0.04, -0.02, 0.03);
    drag(&mut ws, delta, 20);

    let mut kinds = std::collections::BTreeSet::new();
    let mut last_robot = Value::Null;
    let until = Instant::now() + Duration::from_millis(600);
    while Instant::now() < until {
        let v = next_json(&mut ws);
        assert_eq!(v["v"], 1);
        let kind = v["type"].as_str().unwrap().to_string();
        if kind == "robot" {
            last_robot = v.clone();
        }
        if kind == "cloud" {
            let pts = v["payload"]["points_mm"].as_array().unwrap();
            assert!(!pts.is_empty() && pts.len().is_multiple_of(3));
        }
        kinds.insert(kind);
    }
    assert!(
        kinds.contains("robot") && kinds.contains("wrench") && kinds.contains("metrics") && kinds.contains("cloud"),
        "{kinds:?}"
    );
    assert_eq!(last_robot["payload"]["engaged"], true);
    drop(ws);
    let log = h.join().unwrap();
    assert!(!log.aborted());

    let expected = home(&log).compose(&Transform::from_translation(delta));
    let (desired, actual, _) = log
        .records
        .iter()
        .filter_map(|r| match r {
            Record::State {
                desired, actual, engaged: true, ..
            } => Some((*desired, *actual, true)),
            _ => None,
        })
        .next_back()
        .unwrap();
    assert!((desired.translation - expected.translation).norm() < 1e-9);
    assert!(desired.rotation.angle_to(&expected.rotation) < 1e-9);
    assert!((actual.translation - expected.translation).norm() < 5e-3);
    assert!(log.records.iter().any(|r| matches!(r, Record::Ui { connected: true, .. })));
}

#[test]
fn disconnect_mid_drag_trips_the_watchdog() {
    let (url, h) = start(ui_config(1.5));
    let mut ws = connect(&url);
    next_json(&mut ws);
    send(&mut ws, ClientMsg::Clutch { pressed: true });
    thread::sleep(Duration::from_millis(100));
    drag(&mut ws, Vector3::new(0.0, 0.0, 0.05), 10);
    // Vanish without a close handshake, as a crashed browser tab would.
    drop(ws);
    let log = h.join().unwrap();

    let t_gone = log
        .records
        .iter()
        .find_map(|r| match r {
            Record::Ui { t, connected: false } => Some(*t),
            _ => None,
        })
        .expect("disconnect recorded");
    let t_trip = log
        .records
        .iter()
        .find_map(|r| match r {
            Record::Watchdog { t, tripped: true } => Some(*t),
            _ => None,
        })
        .expect("watchdog tripped");
    let t_last_apply = log
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Apply { t, .. } => Some(*t),
            _ => None,
        })
        .next_back()
        .unwrap();
    assert!(t_trip > t_gone, "trip {t_trip} before disconnect {t_gone}");
    assert!(t_trip - t_gone <= 0.102, "trip {:.4} s after disconnect", t_trip - t_gone);
    assert!(t_trip - t_last_apply > 0.100 && t_trip - t_last_apply <= 0.1015);
    let (_, _, engaged) = last_state(&log);
    assert!(!engaged);
}

#[test]
fn without_a_client_the_robot_holds_home() {
    let (_url, h) = start(ui_config(0.5));
    let log = h.join().unwrap();
    assert!(!log.aborted());
    assert!(!log.records.iter().any(|r| matches!(r, Record::Command { .. } | Record::Apply { .. })));
    let (desired, actual, engaged) = last_state(&log);
    let home = home(&log);
    assert!(!engaged);
    assert!((desired.translation - home.translation).norm() < 1e-12);
    assert!((actual.translation - home.translation).norm() < 1e-3);
}
