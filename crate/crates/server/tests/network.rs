use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use synchrodaq_core::model::Modality;
use synchrodaq_core::recording::read_session;
use synchrodaq_core::sim::{generate_scenario, ScenarioConfig};
use synchrodaq_server::client::{run_trial, sim_meta, ClientMode};
use synchrodaq_server::clock::SystemClock;
use synchrodaq_server::wire::{ControlClient, IngestClient};
use synchrodaq_server::{spawn, Endpoints, Server, ServerConfig, ServerHandle};
use tungstenite::Message;

fn start() -> (tempfile::TempDir, ServerHandle) {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::new(ServerConfig::new(dir.path()), Arc::new(SystemClock::new()));
    let h = spawn(server, Endpoints::ephemeral()).unwrap();
    (dir, h)
}

fn meta_json() -> Value {
    json!({"subject":"S01","task":"peg","trial":1,"master_frequency_hz":30.0,"pedal_mapping":[]})
}

#[test]
fn control_protocol_over_tcp() {
    let (_d, h) = start();
    let mut c = ControlClient::connect(h.endpoints.control).unwrap();
    let v = c.request(&json!({"cmd":"status","id":"a"})).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(v["phase"], "Idle");
    assert_eq!(v["id"], "a");
    let v = c.request(&json!({"cmd":"fly"})).unwrap();
    assert_eq!(v["ok"], false);
    let v = c
        .request(&json!({"cmd":"start_session","meta":meta_json()}))
        .unwrap();
    assert_eq!(v["phase"], "Recording");
    assert_eq!(v["session"], "S01_peg_T01");
    let v = c.request(&json!({"cmd":"stop_session"})).unwrap();
    assert_eq!(v["phase"], "Stopped");
    assert!(v["summary"]["total_bytes"].is_u64());
    // Garbage does not close the connection.
    let v = c.request(&json!(42)).unwrap();
    assert_eq!(v["ok"], false);
    assert_eq!(
        c.request(&json!({"cmd":"list_streams"})).unwrap()["ok"],
        true
    );
    h.shutdown();
}

#[test]
fn health_push_reaches_tcp_subscriber() {
    let (_d, h) = start();
    let mut c = ControlClient::connect(h.endpoints.control).unwrap();
    assert_eq!(
        c.command(&json!({"cmd":"subscribe_health"})).unwrap()["subscribed"],
        true
    );
    let t0 = Instant::now();
    let push = c.read_message().unwrap();
    assert_eq!(push["event"], "health");
    assert!(t0.elapsed() < Duration::from_millis(1_500));
    let second = c.read_message().unwrap();
    assert!(second["as_of_ns"].as_i64() > push["as_of_ns"].as_i64());
    h.shutdown();
}

#[test]
fn ingest_acks_and_stream_release() {
    let (_d, h) = start();
    let spec = synchrodaq_core::model::StreamSpec::new("video", Modality::VideoClock, 30.0, 1);
    let payload = synchrodaq_core::model::Payload::Video { frame_index: 0 };
    {
        let mut ing = IngestClient::connect(h.endpoints.ingest).unwrap();
        ing.register(&spec).unwrap();
        let mut last = 0;
        for _ in 0..50 {
            let ack = ing.send("video", None, &payload).unwrap();
            let ts = ack.server_ts_ns.unwrap();
            assert!(ts > last);
            last = ts;
            assert_eq!(ack.recorded, Some(false));
        }
        assert!(ing.send("ghost", None, &payload).is_err());
        // A second connection cannot take the same modality.
        let mut other = IngestClient::connect(h.endpoints.ingest).unwrap();
        assert!(other.register(&spec).is_err());
    }
    // Disconnect releases the stream outside a session.
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        if h.server().streams().is_empty() {
            break;
        }
        assert!(Instant::now() < deadline, "stream not released");
        std::thread::sleep(Duration::from_millis(10));
    }
    let mut again = IngestClient::connect(h.endpoints.ingest).unwrap();
    again.register(&spec).unwrap();
    h.shutdown();
}

#[test]
fn replayed_trial_is_recorded_completely() {
    let (d, h) = start();
    let mut cfg = ScenarioConfig {
        duration_s: 4.0,
        ..ScenarioConfig::default()
    };
    cfg.keypoints.dropout_fraction = 0.1;
    let scenario = generate_scenario(&cfg, 5).unwrap();
    let gt = d.path().join("gt");
    let meta = sim_meta(&scenario, "S02", "suture", 3);
    let run = run_trial(
        h.endpoints.control,
        h.endpoints.ingest,
        &scenario,
        &meta,
        ClientMode::Replay,
        Some(&gt),
        None,
    )
    .unwrap();
    assert!(gt
        .join(format!("{}.scenario.json", run.summary.session))
        .exists());
    let rec = read_session(&run.summary.dir).unwrap();
    for m in [
        Modality::EmTracker,
        Modality::HandKeypoints,
        Modality::PedalFsr,
        Modality::VideoClock,
    ] {
        let samples = rec.samples(m);
        let id = synchrodaq_core::sim::stream_id_for(m);
        assert_eq!(samples.len(), run.sent[id], "{id}");
        assert!(
            samples.windows(2).all(|w| w[0].server_ts < w[1].server_ts),
            "{id} not increasing"
        );
        for s in samples {
            if let Some(src) = s.source_ts {
                assert!(src <= s.server_ts, "{id}: source after server");
            }
        }
    }
    assert_eq!(rec.samples(Modality::VideoClock).len(), 120);
    assert_eq!(rec.samples(Modality::EmTracker).len(), 1080);
    assert!(rec
        .samples(Modality::VideoClock)
        .iter()
        .all(|s| s.source_ts.is_none()));
    assert!(h.shutdown().is_none());
}

#[test]
fn shutdown_finalizes_running_session() {
    let (d, h) = start();
    let mut c = ControlClient::connect(h.endpoints.control).unwrap();
    c.command(&json!({"cmd":"start_session","meta":meta_json()}))
        .unwrap();
    let summary = h.shutdown().unwrap().unwrap();
    assert!(d
        .path()
        .join(&summary.session)
        .join("manifest.json")
        .exists());
}

#[test]
fn refused_connection_is_an_error() {
    let addr: SocketAddr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = ControlClient::connect(addr).err().unwrap();
    assert!(err.to_string().contains("connecting"), "{err}");
    assert!(IngestClient::connect(addr).is_err());
}

fn ws_connect(
    h: &ServerHandle,
    path: &str,
) -> tungstenite::Result<
    tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>,
> {
    let url = format!("ws://{}{path}", h.endpoints.ws.unwrap());
    tungstenite::connect(url).map(|(ws, _)| ws)
}

fn ws_json(
    ws: &mut tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>,
) -> (String, Value) {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => {
                let s = t.to_string();
                let v = serde_json::from_str(&s).unwrap();
                return (s, v);
            }
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn websocket_bridge_speaks_control_protocol() {
    let (_d, h) = start();
    assert!(ws_connect(&h, "/other").is_err());
    let mut ws = ws_connect(&h, "/ws").unwrap();
    ws.send(Message::text(r#"{"cmd":"status","id":1}"#))
        .unwrap();
    let (raw, v) = ws_json(&mut ws);
    assert!(raw.ends_with('\n'));
    assert_eq!(v["cmd"], "status");
    assert_eq!(v["id"], 1);
    assert_eq!(v["phase"], "Idle");

    // Two lines in one message give two replies, in order.
    let two = format!(
        "{}\n{}\n",
        json!({"cmd":"start_session","meta":meta_json(),"id":2}),
        json!({"cmd":"status","id":3})
    );
    ws.send(Message::text(two)).unwrap();
    assert_eq!(ws_json(&mut ws).1["phase"], "Recording");
    assert_eq!(ws_json(&mut ws).1["id"], 3);

    // The TCP socket sees the same state.
    let mut tcp = ControlClient::connect(h.endpoints.control).unwrap();
    assert_eq!(
        tcp.request(&json!({"cmd":"status"})).unwrap()["phase"],
        "Recording"
    );

    ws.send(Message::text(r#"{"cmd":"subscribe_health"}"#))
        .unwrap();
    assert_eq!(ws_json(&mut ws).1["subscribed"], true);
    let (_, push) = ws_json(&mut ws);
    assert_eq!(push["event"], "health");
    assert_eq!(push["phase"], "Recording");

    ws.send(Message::text(r#"{"cmd":"stop_session","id":4}"#))
        .unwrap();
    let v = loop {
        let (_, v) = ws_json(&mut ws);
        if v.get("event").is_none() {
            break v;
        }
    };
    assert_eq!(v["phase"], "Stopped");
    assert_eq!(v["id"], 4);
    ws.send(Message::text("not json")).unwrap();
    let v = loop {
        let (_, v) = ws_json(&mut ws);
        if v.get("event").is_none() {
            break v;
        }
    };
    assert_eq!(v["ok"], false);
    let _ = ws.close(None);
    h.shutdown();
}
