//! TCP listeners, health broadcasting and the running-server handle.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use synchrodaq_core::model::Timestamp;

use crate::control::{handle_control, health_message};
use crate::error::{Result, ServerError};
use crate::server::{Server, SessionSummary};
use crate::wire::{read_frame, write_frame, IngestAck, IngestRecord, RegisterRecord};
use crate::ws::serve_ws;

pub const DEFAULT_CONTROL_PORT: u16 = 7340;
pub const DEFAULT_INGEST_PORT: u16 = 7341;
pub const DEFAULT_WS_PORT: u16 = 7342;
pub const HEALTH_PUSH_INTERVAL: Duration = Duration::from_secs(1);
const ACCEPT_POLL: Duration = Duration::from_millis(20);

/// State shared by every connection of one running server.
pub(crate) struct Shared {
    pub server: Server,
    pub shutdown: AtomicBool,
    next_id: AtomicU64,
    subscribers: Mutex<HashMap<u64, Sender<String>>>,
    open: Mutex<HashMap<u64, TcpStream>>,
}

impl Shared {
    pub fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    pub fn subscribe(&self, id: u64, tx: Sender<String>) {
        self.subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, tx);
    }

    pub fn unsubscribe(&self, id: u64) {
        self.subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&id);
    }

    pub fn track(&self, id: u64, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.open
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .insert(id, c);
        }
    }

    pub fn untrack(&self, id: u64) {
        self.open
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&id);
    }

    fn broadcast(&self, line: &str) {
        let mut subs = self.subscribers.lock().unwrap_or_else(|p| p.into_inner());
        subs.retain(|_, tx| tx.send(line.to_string()).is_ok());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoints {
    pub control: SocketAddr,
    pub ingest: SocketAddr,
    /// WebSocket bridge; `None` disables it.
    pub ws: Option<SocketAddr>,
}

impl Endpoints {
    /// Loopback endpoints on OS-assigned ports.
    pub fn ephemeral() -> Self {
        let any: SocketAddr = "127.0.0.1:0".parse().expect("valid address");
        Endpoints {
            control: any,
            ingest: any,
            ws: Some(any),
        }
    }
}

/// A server listening on its sockets. Dropping it without [`shutdown`](Self::shutdown) leaves threads running.
pub struct ServerHandle {
    shared: Arc<Shared>,
    pub endpoints: Endpoints,
    threads: Vec<JoinHandle<()>>,
}

fn bind(addr: SocketAddr, what: &str) -> Result<TcpListener> {
    let l = TcpListener::bind(addr)
        .map_err(|e| ServerError::io(format!("binding {what} socket {addr}"), e))?;
    l.set_nonblocking(true)
        .map_err(|e| ServerError::io(format!("configuring {what} socket"), e))?;
    Ok(l)
}

fn spawn_named(name: &str, f: impl FnOnce() + Send + 'static) -> Result<JoinHandle<()>> {
    thread::Builder::new()
        .name(name.into())
        .spawn(f)
        .map_err(|e| ServerError::io(format!("spawning {name}"), e))
}

/// Binds every socket and starts serving.
pub fn spawn(server: Server, endpoints: Endpoints) -> Result<ServerHandle> {
    let control = bind(endpoints.control, "control")?;
    let ingest = bind(endpoints.ingest, "ingest")?;
    let ws = endpoints.ws.map(|a| bind(a, "websocket")).transpose()?;
    let local = |l: &TcpListener| {
        l.local_addr()
            .map_err(|e| ServerError::io("reading bound address", e))
    };
    let bound = Endpoints {
        control: local(&control)?,
        ingest: local(&ingest)?,
        ws: ws.as_ref().map(local).transpose()?,
    };
    let shared = Arc::new(Shared {
        server,
        shutdown: AtomicBool::new(false),
        next_id: AtomicU64::new(1),
        subscribers: Mutex::new(HashMap::new()),
        open: Mutex::new(HashMap::new()),
    });
    let mut threads = Vec::new();
    let sh = Arc::clone(&shared);
    threads.push(spawn_named("control-accept", move || {
        accept_loop(&sh, &control, serve_control)
    })?);
    let sh = Arc::clone(&shared);
    threads.push(spawn_named("ingest-accept", move || {
        accept_loop(&sh, &ingest, serve_ingest)
    })?);
    if let Some(ws) = ws {
        let sh = Arc::clone(&shared);
        threads.push(spawn_named("ws-accept", move || {
            accept_loop(&sh, &ws, serve_ws)
        })?);
    }
    let sh = Arc::clone(&shared);
    threads.push(spawn_named("health-push", move || health_loop(&sh))?);
    log::info!(
        "control on {}, ingest on {}{}",
        bound.control,
        bound.ingest,
        bound
            .ws
            .map(|a| format!(", websocket on ws://{a}/ws"))
            .unwrap_or_default()
    );
    Ok(ServerHandle {
        shared,
        endpoints: bound,
        threads,
    })
}

impl ServerHandle {
    pub fn server(&self) -> &Server {
        &self.shared.server
    }

    /// Stops accepting, closes open connections and flushes a running session.
    pub fn shutdown(self) -> Option<Result<SessionSummary>> {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for (_, s) in self
            .shared
            .open
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .drain()
        {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads {
            let _ = t.join();
        }
        self.shared.server.shutdown()
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: &TcpListener, handler: fn(Arc<Shared>, TcpStream)) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let sh = Arc::clone(shared);
                let _ = thread::Builder::new()
                    .name(format!("conn-{peer}"))
                    .spawn(move || handler(sh, stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn health_loop(shared: &Shared) {
    let mut next = Instant::now() + HEALTH_PUSH_INTERVAL;
    while !shared.shutdown.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= next {
            shared.broadcast(&health_message(&shared.server.snapshot_health()));
            next += HEALTH_PUSH_INTERVAL;
        } else {
            thread::sleep((next - now).min(ACCEPT_POLL));
        }
    }
}

fn serve_control(shared: Arc<Shared>, stream: TcpStream) {
    let id = shared.next_id();
    shared.track(id, &stream);
    let (tx, rx) = mpsc::channel::<String>();
    let writer = stream.try_clone().map(|mut w| {
        thread::spawn(move || {
            for line in rx {
                if w.write_all(line.as_bytes()).is_err() {
                    break;
                }
            }
        })
    });
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let line = String::from_utf8_lossy(&buf);
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_control(&shared.server, line.trim());
        if tx.send(reply.line).is_err() {
            break;
        }
        if reply.subscribe {
            shared.subscribe(id, tx.clone());
        }
    }
    shared.unsubscribe(id);
    shared.untrack(id);
    drop(tx);
    if let Ok(w) = writer {
        let _ = w.join();
    }
}

fn ingest_reply(shared: &Shared, body: &[u8], owned: &mut Vec<String>) -> IngestAck {
    let value: serde_json::Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(e) => return IngestAck::error(format!("invalid JSON: {e}")),
    };
    if value.get("register").is_some() {
        return match serde_json::from_value::<RegisterRecord>(value) {
            Ok(r) => {
                let id = r.register.stream_id.clone();
                match shared.server.register_stream(r.register) {
                    Ok(()) => {
                        owned.push(id.clone());
                        IngestAck {
                            ok: true,
                            recorded: None,
                            server_ts_ns: None,
                            registered: Some(id),
                            error: None,
                        }
                    }
                    Err(e) => IngestAck::error(e),
                }
            }
            Err(e) => IngestAck::error(format!("invalid stream spec: {e}")),
        };
    }
    let rec: IngestRecord = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return IngestAck::error(format!("invalid record: {e}")),
    };
    let source = match rec.source_ts_ns.map(Timestamp::from_nanos).transpose() {
        Ok(s) => s,
        Err(e) => return IngestAck::error(e),
    };
    match shared.server.ingest(&rec.stream_id, source, rec.payload) {
        Ok(ack) => IngestAck {
            ok: true,
            recorded: Some(ack.recorded),
            server_ts_ns: Some(ack.server_ts.as_nanos()),
            registered: None,
            error: None,
        },
        Err(e) => IngestAck::error(e),
    }
}

fn serve_ingest(shared: Arc<Shared>, stream: TcpStream) {
    let id = shared.next_id();
    shared.track(id, &stream);
    let mut owned = Vec::new();
    let mut reader = BufReader::new(&stream);
    let mut writer = &stream;
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(e) => {
                log::debug!("ingest connection closed: {e}");
                break;
            }
        };
        let ack = ingest_reply(&shared, &body, &mut owned);
        let bytes = serde_json::to_vec(&ack).unwrap_or_default();
        if write_frame(&mut writer, &bytes).is_err() {
            break;
        }
    }
    for s in owned {
        shared.server.release_stream(&s);
    }
    shared.untrack(id);
}
