use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tnr_core::geometry::{Pose6DoF, Timestamp, Vec3};
use tnr_core::orchestrator::{format_poses, MissionReport};

fn tnr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// 3 m walk along x at 0.5 m/s with a 2.5 s dwell in the middle.
fn write_walk(path: &Path) {
    let mut poses = Vec::new();
    let mut t = 0u64;
    let mut push = |x: f64, poses: &mut Vec<Pose6DoF>| {
        poses.push(Pose6DoF::from_yaw(Timestamp(t), Vec3::new(x, 0.0, 1.0), 0.0));
        t += 50_000_000;
    };
    for k in 0..=30 {
        push(k as f64 * 0.05, &mut poses);
    }
    for _ in 0..50 {
        push(1.5, &mut poses);
    }
    for k in 31..=60 {
        push(k as f64 * 0.05, &mut poses);
    }
    std::fs::write(path, format_poses(&poses)).unwrap();
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

#[test]
fn teach_repeat_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (poses, config, session, log, report) = (
        path(&dir, "poses.txt"),
        path(&dir, "config.json"),
        path(&dir, "session.tnr"),
        path(&dir, "log.txt"),
        path(&dir, "report.json"),
    );
    write_walk(Path::new(&poses));
    std::fs::write(&config, r#"{"noise": {"sigma_p": 0, "sigma_yaw": 0}}"#).unwrap();

    let out = tnr(&["teach", "--poses", &poses, "--config", &config, "--out", &session]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 inspection points"));

    let out = tnr(&[
        "repeat",
        "--session",
        &session,
        "--config",
        &config,
        "--log",
        &log,
        "--report",
        &report,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written: MissionReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(written.completed);
    assert_eq!(written.inspections.len(), 1);

    let out = tnr(&["metrics", "--log", &log, "--session", &session]);
    assert_eq!(code(&out), 0);
    let recomputed: MissionReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(recomputed, written);
}

#[test]
fn follow_writes_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let (poses, log) = (path(&dir, "poses.txt"), path(&dir, "follow.txt"));
    write_walk(Path::new(&poses));
    let out = tnr(&["follow", "--poses", &poses, "--log", &log]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() > 100);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (poses, config, session, log, report) = (
        path(&dir, "poses.txt"),
        path(&dir, "config.json"),
        path(&dir, "session.tnr"),
        path(&dir, "log.txt"),
        path(&dir, "report.json"),
    );
    write_walk(Path::new(&poses));

    std::fs::write(&config, r#"{"d_safe": -1}"#).unwrap();
    assert_eq!(
        code(&tnr(&[
            "teach", "--poses", &poses, "--config", &config, "--out", &session
        ])),
        2
    );
    std::fs::write(&config, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&tnr(&["serve", "--config", &config, "--port", "1"])), 2);

    let missing = path(&dir, "missing.txt");
    assert_eq!(code(&tnr(&["teach", "--poses", &missing, "--out", &session])), 4);
    std::fs::write(&missing, "not a pose\n").unwrap();
    assert_eq!(code(&tnr(&["teach", "--poses", &missing, "--out", &session])), 4);

    // a sphere parked on the path blocks the mission
    assert_eq!(code(&tnr(&["teach", "--poses", &poses, "--out", &session])), 0);
    std::fs::write(
        &config,
        r#"{"blocked_timeout": 2, "spheres": [{"owner_id": 9, "center": [2.2, 0, 1], "radius": 0.4}]}"#,
    )
    .unwrap();
    let out = tnr(&[
        "repeat",
        "--session",
        &session,
        "--config",
        &config,
        "--log",
        &log,
        "--report",
        &report,
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&log).exists() && Path::new(&report).exists());
}

#[test]
fn serve_accepts_websocket_clients() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_tnr"))
        .args(["serve", "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut ws = loop {
        match tungstenite::connect(format!("ws://127.0.0.1:{port}")) {
            Ok((ws, _)) => break ws,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("bridge never came up: {e}"),
        }
    };
    let frame = loop {
        if let tungstenite::Message::Text(t) = ws.read().unwrap() {
            break t;
        }
    };
    let v: serde_json::Value = serde_json::from_str(&frame).unwrap();
    assert_eq!(v["type"], "state");
    child.kill().unwrap();
    child.wait().unwrap();
}
