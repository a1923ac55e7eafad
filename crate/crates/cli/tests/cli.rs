use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_synchrodaq");

fn cmd(data: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

struct Served {
    child: Child,
    control: String,
    ingest: String,
}

impl Served {
    fn start(data: &Path) -> Served {
        let mut child = Command::new(BIN)
            .arg("--data-dir")
            .arg(data)
            .args([
                "serve",
                "--port",
                "0",
                "--ingest-port",
                "0",
                "--ws-port",
                "0",
            ])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let field = |k: &str| {
            line.split_whitespace()
                .find_map(|w| w.strip_prefix(&format!("{k}=")))
                .unwrap_or_else(|| panic!("no {k} in `{line}`"))
                .to_string()
        };
        Served {
            control: field("control"),
            ingest: field("ingest"),
            child,
        }
    }

    fn interrupt(mut self) -> i32 {
        Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(s) = self.child.try_wait().unwrap() {
                return s.code().unwrap_or(-1);
            }
            assert!(Instant::now() < deadline, "serve did not exit");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

fn scenario(dir: &Path, seconds: f64) -> PathBuf {
    let p = dir.join("scenario.json");
    std::fs::write(
        &p,
        format!(r#"{{"duration_s": {seconds}, "em": {{"noise_sd_cm": 0.1}}}}"#),
    )
    .unwrap();
    p
}

fn sim(data: &Path, s: &Served, sc: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "sim",
        "--scenario",
        sc.to_str().unwrap(),
        "--server",
        &s.control,
        "--ingest",
        &s.ingest,
    ];
    args.extend_from_slice(extra);
    cmd(data, &args)
}

fn data_rows(path: &Path) -> Vec<String> {
    // Drop the two timestamp columns, which depend on when the run happened.
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.splitn(3, ',').nth(2).unwrap_or("").to_string())
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cmd(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&cmd(d.path(), &["sim", "--replay", "--realtime"])), 1);
    assert_eq!(code(&cmd(d.path(), &["--help"])), 0);
    let o = cmd(d.path(), &["export", "--out", "x", "--format", "parquet"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("parquet"));
}

#[test]
fn sim_without_server_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let o = cmd(d.path(), &["sim", "--server", &addr, "--ingest", &addr]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn busy_port_fails() {
    let d = tempfile::tempdir().unwrap();
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = l.local_addr().unwrap().port().to_string();
    let o = cmd(
        d.path(),
        &["serve", "--port", &port, "--ingest-port", "0", "--no-ws"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_session_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cmd(d.path(), &["align", "--session", "nope"])), 3);
    assert_eq!(code(&cmd(d.path(), &["align"])), 3);
    assert_eq!(code(&cmd(d.path(), &["eval", "--calib", "nowhere"])), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"trials": 0}"#).unwrap();
    // The config's zero trials is refused unless a flag overrides it; the
    // override then fails later, on the absent server.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let c = cfg.to_str().unwrap();
    let o = cmd(
        d.path(),
        &["--config", c, "sim", "--server", &addr, "--ingest", &addr],
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("--trials"));
    let o = cmd(
        d.path(),
        &[
            "--config", c, "sim", "--server", &addr, "--ingest", &addr, "--trials", "1",
        ],
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("connecting"));
    std::fs::write(&cfg, r#"{"trails": 2}"#).unwrap();
    assert_eq!(code(&cmd(d.path(), &["--config", c, "align"])), 1);
}

#[test]
fn record_align_calibrate_eval() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let sc = scenario(d.path(), 10.0);
    let s = Served::start(&data);
    let o = sim(
        &data,
        &s,
        &sc,
        &["--trials", "3", "--seed", "4", "--replay"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    // Count oracle: 10 s at 270/30/30/30 Hz.
    assert!(
        out.contains("em=2700 keypoints=300 pss=300 video=300"),
        "{out}"
    );
    assert_eq!(s.interrupt(), 0);

    let session = data.join("SIM_peg-transfer_T01");
    let o = cmd(&data, &["align", "--session", session.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let full = std::fs::read_to_string(session.join("aligned/SIM_peg-transfer_T01.csv")).unwrap();
    assert_eq!(full.lines().count() - 1, 300);
    // No labels given: every frame is background.
    assert!(full.lines().skip(1).all(|l| l.ends_with(",BG")));

    let ten = d.path().join("ten");
    let o = cmd(
        &data,
        &[
            "align",
            "--session",
            "SIM_peg-transfer_T01",
            "--rate",
            "10",
            "--out",
            ten.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    let sub = std::fs::read_to_string(ten.join("SIM_peg-transfer_T01.csv")).unwrap();
    assert_eq!(sub.lines().count() - 1, 100);

    // With ground-truth labels the gestures appear.
    let gt = data.join("ground_truth");
    let lab = d.path().join("lab");
    let o = cmd(
        &data,
        &[
            "export",
            "--session",
            "SIM_peg-transfer_T01",
            "--labels",
            gt.to_str().unwrap(),
            "--out",
            lab.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    let labelled = std::fs::read_to_string(lab.join("SIM_peg-transfer_T01.csv")).unwrap();
    assert!(labelled.lines().skip(1).any(|l| !l.ends_with(",BG")));
    assert!(lab.join("SIM_peg-transfer_T01.schema.json").exists());

    // One trial cannot be cross-validated.
    let o = cmd(
        &data,
        &[
            "calibrate",
            "--session",
            "SIM_peg-transfer_T01",
            "--epochs",
            "2",
        ],
    );
    assert_eq!(code(&o), 3);

    let o = cmd(&data, &["calibrate", "--epochs", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cv: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("calib/cv_report.json")).unwrap())
            .unwrap();
    assert_eq!(cv["emht-M"]["folds"].as_array().unwrap().len(), 3);
    assert!(data.join("calib/emht-M.rigid.json").exists());
    assert!(data.join("calib/pss.thresholds.json").exists());

    let o = cmd(&data, &["eval"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(data.join("reports/trajectory_metrics.csv")).unwrap();
    let o = cmd(&data, &["eval"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        first,
        std::fs::read(data.join("reports/trajectory_metrics.csv")).unwrap()
    );

    let empty = d.path().join("empty_gt");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        code(&cmd(&data, &["eval", "--gt", empty.to_str().unwrap()])),
        3
    );
}

#[test]
fn same_seed_gives_identical_recordings() {
    let d = tempfile::tempdir().unwrap();
    let sc = scenario(d.path(), 3.0);
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let data = d.path().join(run);
        let s = Served::start(&data);
        let o = sim(&data, &s, &sc, &["--seed", "21"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        s.interrupt();
        dirs.push(data.join("SIM_peg-transfer_T01"));
    }
    for f in ["em.csv", "keypoints.csv", "pss.csv"] {
        assert_eq!(
            data_rows(&dirs[0].join(f)),
            data_rows(&dirs[1].join(f)),
            "{f}"
        );
    }
    let video = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(
        video(&dirs[0].join("video.csv")),
        video(&dirs[1].join("video.csv"))
    );
}

#[test]
fn interrupt_during_recording_flushes_files() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let s = Served::start(&data);
    let addr: std::net::SocketAddr = s.control.parse().unwrap();
    let mut ctl = synchrodaq_server::wire::ControlClient::connect(addr).unwrap();
    ctl.command(&serde_json::json!({
        "cmd": "start_session",
        "meta": {"subject":"S","task":"t","trial":1,"master_frequency_hz":30.0,"pedal_mapping":[]}
    }))
    .unwrap();
    let ing: std::net::SocketAddr = s.ingest.parse().unwrap();
    let mut c = synchrodaq_server::wire::IngestClient::connect(ing).unwrap();
    c.register(&synchrodaq_core::model::StreamSpec::new(
        "video",
        synchrodaq_core::model::Modality::VideoClock,
        30.0,
        1,
    ))
    .unwrap();
    for k in 0..25 {
        c.send(
            "video",
            None,
            &synchrodaq_core::model::Payload::Video { frame_index: k },
        )
        .unwrap();
    }
    assert_eq!(s.interrupt(), 0);
    let text = std::fs::read_to_string(data.join("S_t_T01/video.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);
}
