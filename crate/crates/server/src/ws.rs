//! WebSocket bridge at `/ws` for browser clients. Each text message carries
//! one or more control lines; replies and health pushes go back as text
//! messages holding the same JSON lines the TCP control socket sends.

use std::io::ErrorKind;
use std::net::TcpStream;
use std::sync::atomic::Ordering;
use std::sync::mpsc::{self, TryRecvError};
use std::sync::Arc;
use std::time::Duration;

use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Error as WsError, Message};

use crate::control::handle_control;
use crate::net::Shared;

pub const WS_PATH: &str = "/ws";
const POLL: Duration = Duration::from_millis(50);

fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == WS_PATH {
        return Ok(resp);
    }
    let mut err = ErrorResponse::new(Some(format!(
        "no websocket endpoint at {}",
        req.uri().path()
    )));
    *err.status_mut() = StatusCode::NOT_FOUND;
    Err(err)
}

pub(crate) fn serve_ws(shared: Arc<Shared>, stream: TcpStream) {
    let id = shared.next_id();
    shared.track(id, &stream);
    if stream.set_read_timeout(Some(POLL)).is_err() {
        shared.untrack(id);
        return;
    }
    let mut ws = match tungstenite::accept_hdr(stream, check_path) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake failed: {e}");
            shared.untrack(id);
            return;
        }
    };
    let (tx, rx) = mpsc::channel::<String>();
    'conn: while !shared.shutdown.load(Ordering::SeqCst) {
        loop {
            match rx.try_recv() {
                Ok(line) => {
                    if ws.send(Message::text(line)).is_err() {
                        break 'conn;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => break 'conn,
            }
        }
        let text = match ws.read() {
            Ok(Message::Text(t)) => t.to_string(),
            Ok(Message::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                break;
            }
            Ok(_) => continue,
            Err(WsError::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
            {
                continue
            }
            Err(_) => break,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let reply = handle_control(&shared.server, line);
            if ws.send(Message::text(reply.line)).is_err() {
                break 'conn;
            }
            if reply.subscribe {
                shared.subscribe(id, tx.clone());
            }
        }
    }
    shared.unsubscribe(id);
    shared.untrack(id);
}
