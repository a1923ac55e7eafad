//! Ingestion framing and small blocking clients for both sockets.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use synchrodaq_core::model::{Payload, StreamSpec, Timestamp};

use crate::error::{Result, ServerError};

/// Largest accepted ingestion record.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// Next frame body, or `None` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds {MAX_FRAME_BYTES}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Body of one sample record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub stream_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ts_ns: Option<i64>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRecord {
    pub register: StreamSpec,
}

/// Reply to every ingestion record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestAck {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_ts_ns: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registered: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IngestAck {
    pub fn error(msg: impl std::fmt::Display) -> Self {
        IngestAck {
            ok: false,
            recorded: None,
            server_ts_ns: None,
            registered: None,
            error: Some(msg.to_string()),
        }
    }
}

fn connect(addr: SocketAddr) -> Result<TcpStream> {
    let s = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
        .map_err(|e| ServerError::io(format!("connecting to {addr}"), e))?;
    s.set_nodelay(true)
        .map_err(|e| ServerError::io("configuring socket", e))?;
    Ok(s)
}

/// One client connection to the ingestion socket.
pub struct IngestClient {
    stream: TcpStream,
}

impl IngestClient {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        Ok(IngestClient {
            stream: connect(addr)?,
        })
    }

    fn round_trip(&mut self, body: &[u8]) -> Result<IngestAck> {
        write_frame(&mut self.stream, body).map_err(|e| ServerError::io("sending record", e))?;
        let reply = read_frame(&mut self.stream)
            .map_err(|e| ServerError::io("reading ack", e))?
            .ok_or_else(|| ServerError::protocol("server closed the ingestion connection"))?;
        serde_json::from_slice(&reply).map_err(|e| ServerError::protocol(format!("bad ack: {e}")))
    }

    pub fn register(&mut self, spec: &StreamSpec) -> Result<()> {
        let body = serde_json::to_vec(&RegisterRecord {
            register: spec.clone(),
        })
        .map_err(|e| ServerError::protocol(e.to_string()))?;
        let ack = self.round_trip(&body)?;
        match ack.error {
            Some(e) if !ack.ok => Err(ServerError::protocol(e)),
            _ => Ok(()),
        }
    }

    /// Sends one sample and waits for its ack.
    pub fn send(
        &mut self,
        stream_id: &str,
        source_ts: Option<Timestamp>,
        payload: &Payload,
    ) -> Result<IngestAck> {
        let rec = IngestRecord {
            stream_id: stream_id.to_string(),
            source_ts_ns: source_ts.map(Timestamp::as_nanos),
            payload: payload.clone(),
        };
        let body = serde_json::to_vec(&rec).map_err(|e| ServerError::protocol(e.to_string()))?;
        let ack = self.round_trip(&body)?;
        if !ack.ok {
            return Err(ServerError::protocol(
                ack.error.unwrap_or_else(|| "sample rejected".into()),
            ));
        }
        Ok(ack)
    }
}

/// Line-oriented client for the control socket. Health pushes arriving
/// between requests are set aside.
pub struct ControlClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    pub pushes: Vec<Value>,
}

impl ControlClient {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let s = connect(addr)?;
        let reader = BufReader::new(
            s.try_clone()
                .map_err(|e| ServerError::io("cloning socket", e))?,
        );
        Ok(ControlClient {
            writer: s,
            reader,
            pushes: Vec::new(),
        })
    }

    /// Next message of any kind.
    pub fn read_message(&mut self) -> Result<Value> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| ServerError::io("reading control reply", e))?;
        if n == 0 {
            return Err(ServerError::protocol(
                "server closed the control connection",
            ));
        }
        serde_json::from_str(&line).map_err(|e| ServerError::protocol(format!("bad reply: {e}")))
    }

    pub fn request(&mut self, req: &Value) -> Result<Value> {
        let mut line = req.to_string();
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .map_err(|e| ServerError::io("sending control request", e))?;
        loop {
            let v = self.read_message()?;
            if v.get("event").is_some() {
                self.pushes.push(v);
            } else {
                return Ok(v);
            }
        }
    }

    /// Like [`request`](Self::request) but turns `ok: false` into an error.
    pub fn command(&mut self, req: &Value) -> Result<Value> {
        let v = self.request(req)?;
        if v["ok"] == Value::Bool(true) {
            Ok(v)
        } else {
            Err(ServerError::protocol(
                v["error"].as_str().unwrap_or("command failed").to_string(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        write_frame(&mut buf, b"[1]").unwrap();
        assert_eq!(&buf[..4], &[2, 0, 0, 0]);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"{}");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"[1]");
        assert!(read_frame(&mut r).unwrap().is_none());
        let mut short: &[u8] = &[5, 0];
        assert!(read_frame(&mut short).is_err());
    }

    #[test]
    fn record_json_shape() {
        let r: IngestRecord =
            serde_json::from_str(r#"{"stream_id":"video","payload":{"video":{"frame_index":3}}}"#)
                .unwrap();
        assert_eq!(r.payload, Payload::Video { frame_index: 3 });
        assert!(r.source_ts_ns.is_none());
    }
}
