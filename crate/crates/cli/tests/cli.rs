use std::path::Path;
use std::process::{Command, Output};

fn teleop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teleop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--duration",
    "1.5",
    "--set",
    "channel.profile=\"wifi\"",
    "--set",
    "cameras.count=1",
    "--set",
    "cameras.width=160",
];

#[test]
fn run_replay_metrics_and_haptics() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s.jsonl");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/descent.toml");
    let mut args = vec!["run", "-c", path(&cfg), "--out", path(&log)];
    args.extend(SMALL);
    let out = teleop(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = &json(&out)["metrics"];
    assert_eq!(m["aborted"], false);
    assert_eq!(m["clutch_engagements"], 1);

    let out = teleop(&["replay", path(&log)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("identical"));

    let again = teleop(&["metrics", path(&log)]);
    assert_eq!(code(&again), 0);
    assert_eq!(&json(&again), m);

    let out = teleop(&["haptics", path(&log)]);
    assert_eq!(code(&out), 0);
    let events: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.first().map(|e| e["kind"].clone()), Some("impulse".into()));
    assert!(events.iter().skip(1).all(|e| e["kind"] == "cyclic"));
}

#[test]
fn tampered_log_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s.jsonl");
    let out = teleop(&["run", "--duration", "0.3", "--set", "cameras.count=0", "--out", path(&log)]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let i = lines.iter().position(|l| l.contains("\"type\":\"rtt\"")).expect("rtt record");
    lines[i] = lines[i].replace("\"rtt_ms\":", "\"rtt_ms\":1");
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let out = teleop(&["replay", path(&log)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains(&format!("line {}", i + 1)));
}

#[test]
fn config_errors_exit_with_2() {
    let out = teleop(&["run", "--set", "channel.profile=\"carrier-pigeon\""]);
    assert_eq!(code(&out), 2);
    let out = teleop(&["run", "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
    let out = teleop(&["run", "--set", "cameras.fps=25"]);
    assert_eq!(code(&out), 2);
    let out = teleop(&["run", "-c", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn aborted_log_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s.jsonl");
    assert_eq!(code(&teleop(&["run", "--duration", "0.1", "--set", "cameras.count=0", "--out", path(&log)])), 0);
    let text = std::fs::read_to_string(&log).unwrap();
    let end = text.lines().last().unwrap();
    assert!(end.contains("\"type\":\"end\""));
    let patched = text.replace(end, &end.replace("\"aborted\":false", "\"aborted\":true"));
    std::fs::write(&log, patched).unwrap();
    let out = teleop(&["metrics", path(&log)]);
    assert_eq!(code(&out), 3);
    assert_eq!(json(&out)["aborted"], true);
}

#[test]
fn codec_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("scene.pgm");
    let coded = dir.path().join("scene.dpth");
    let back = dir.path().join("back.pgm");
    let out = teleop(&["codec", "synth", path(&pgm), "--width", "212", "--height", "120", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let out = teleop(&["codec", "encode", path(&pgm), path(&coded)]);
    assert_eq!(code(&out), 0);
    assert!(json(&out)["ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(code(&teleop(&["codec", "decode", path(&coded), path(&back)])), 0);
    assert_eq!(std::fs::read(&pgm).unwrap(), std::fs::read(&back).unwrap());

    let mut bytes = std::fs::read(&coded).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x10;
    std::fs::write(&coded, bytes).unwrap();
    let out = teleop(&["codec", "decode", path(&coded), path(&back)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn benches_report_json() {
    let out = teleop(&["codec-bench", "--frames", "4", "--width", "160", "--height", "120", "--sequential"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["frames"], 4);
    assert!(v["ratio"].as_f64().unwrap() > 1.0 && v["encode_fps"].as_f64().unwrap() > 0.0);

    let out = teleop(&["channel-bench", "--runs", "2", "--probes", "50"]);
    assert_eq!(code(&out), 0);
    let rows = json(&out);
    let names: Vec<_> = rows.as_array().unwrap().iter().map(|r| r["profile"].clone()).collect();
    assert_eq!(names, ["wifi", "5g-nsa"]);
    assert!(rows[0]["measured"]["mean_ms"].as_f64().unwrap() > 0.0);

    assert_eq!(code(&teleop(&["channel-bench", "--profile", "dialup"])), 2);
}
