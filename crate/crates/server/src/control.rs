//! Newline-delimited JSON control protocol.

use serde_json::{json, Map, Value};
use synchrodaq_core::model::SessionMeta;

use crate::server::{HealthSnapshot, Server};

/// Reply to one control line.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlReply {
    /// One JSON document followed by `\n`.
    pub line: String,
    /// The connection asked for 1 Hz health pushes.
    pub subscribe: bool,
}

fn encode(v: &Value) -> String {
    let mut s = v.to_string();
    s.push('\n');
    s
}

fn error_reply(msg: impl std::fmt::Display, cmd: Option<&str>, id: Option<&Value>) -> Value {
    let mut m = Map::new();
    m.insert("ok".into(), Value::Bool(false));
    if let Some(c) = cmd {
        m.insert("cmd".into(), Value::String(c.into()));
    }
    if let Some(id) = id {
        m.insert("id".into(), id.clone());
    }
    m.insert("error".into(), Value::String(msg.to_string()));
    Value::Object(m)
}

/// `start_session` takes its metadata either under `meta` or inline.
fn session_meta(req: &Map<String, Value>) -> Result<SessionMeta, String> {
    let body = match req.get("meta") {
        Some(m) => m.clone(),
        None => {
            let mut m = req.clone();
            m.remove("cmd");
            m.remove("id");
            Value::Object(m)
        }
    };
    serde_json::from_value(body).map_err(|e| format!("invalid session metadata: {e}"))
}

/// The `health` push message.
pub fn health_message(h: &HealthSnapshot) -> String {
    encode(&json!({
        "ok": true,
        "event": "health",
        "as_of_ns": h.as_of_ns,
        "phase": h.phase,
        "streams": h.streams,
    }))
}

/// Executes one control request. Malformed requests and failed commands
/// produce an error reply; the connection always stays usable.
pub fn handle_control(server: &Server, line: &str) -> ControlReply {
    let reply = |v: Value, subscribe| ControlReply {
        line: encode(&v),
        subscribe,
    };
    let req = match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(m)) => m,
        Ok(_) => {
            return reply(
                error_reply("request must be a JSON object", None, None),
                false,
            )
        }
        Err(e) => return reply(error_reply(format!("invalid JSON: {e}"), None, None), false),
    };
    let id = req.get("id");
    let Some(cmd) = req.get("cmd").and_then(Value::as_str) else {
        return reply(error_reply("missing `cmd`", None, id), false);
    };
    let mut out = match cmd {
        "status" => {
            let st = server.state();
            let h = server.snapshot_health();
            json!({
                "ok": true,
                "phase": st.phase,
                "session": st.session,
                "meta": st.meta,
                "started_at_ns": st.started_at,
                "as_of_ns": h.as_of_ns,
                "streams": h.streams,
                "last_summary": server.last_summary(),
            })
        }
        "list_streams" => json!({ "ok": true, "streams": server.streams() }),
        "start_session" => match session_meta(&req).map(|m| server.start_session(m)) {
            Ok(Ok(st)) => json!({
                "ok": true,
                "phase": st.phase,
                "session": st.session,
                "started_at_ns": st.started_at,
            }),
            Ok(Err(e)) => error_reply(e, Some(cmd), id),
            Err(e) => error_reply(e, Some(cmd), id),
        },
        "stop_session" => match server.stop_session() {
            Ok(summary) => json!({ "ok": true, "phase": server.state().phase, "summary": summary }),
            Err(e) => error_reply(e, Some(cmd), id),
        },
        "subscribe_health" => {
            let mut v = json!({ "ok": true, "cmd": cmd, "subscribed": true });
            if let Some(id) = id {
                v["id"] = id.clone();
            }
            return reply(v, true);
        }
        other => error_reply(format!("unknown command `{other}`"), Some(other), id),
    };
    if out["ok"] == Value::Bool(true) {
        out["cmd"] = Value::String(cmd.into());
        if let Some(id) = id {
            out["id"] = id.clone();
        }
    }
    reply(out, false)
}
