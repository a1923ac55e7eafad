//! Stream registry, server-side stamping, session recording and health.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use synchrodaq_core::manifest::{write_manifest, MANIFEST_FILE};
use synchrodaq_core::model::{
    Modality, Payload, SessionMeta, StampedSample, StreamSpec, Timestamp, NANOS_PER_SECOND,
};
use synchrodaq_core::recording::{canonicalize_payload, StreamFileWriter};
use synchrodaq_core::Error as CoreError;

use crate::clock::Clock;
use crate::error::{Result, ServerError};

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;
pub const DEFAULT_HEALTH_WINDOW_NS: i64 = 2 * NANOS_PER_SECOND;
pub const DEFAULT_STALE_AFTER_NS: i64 = 2 * NANOS_PER_SECOND;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Unrecorded samples held per stream before the oldest is dropped.
    pub queue_capacity: usize,
    pub health_window_ns: i64,
    pub stale_after_ns: i64,
    /// How often the recorder drains stream queues to disk.
    pub drain_interval: Duration,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            data_dir: data_dir.into(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            health_window_ns: DEFAULT_HEALTH_WINDOW_NS,
            stale_after_ns: DEFAULT_STALE_AFTER_NS,
            drain_interval: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Recording,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHealth {
    pub stream_id: String,
    pub modality: Modality,
    pub nominal_rate_hz: f64,
    /// Samples per second over the trailing window; 0 when stale.
    pub observed_rate_hz: f64,
    pub last_sample_age_ms: Option<f64>,
    /// Mean of `server_ts − source_ts` over the window; absent without source stamps.
    pub mean_recording_latency_ms: Option<f64>,
    pub sample_count: u64,
    /// Samples dropped on queue overflow during the current session.
    pub dropped: u64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthSnapshot {
    pub as_of_ns: Timestamp,
    pub phase: Phase,
    pub streams: Vec<StreamHealth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub meta: Option<SessionMeta>,
    pub started_at: Option<Timestamp>,
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub stream_id: String,
    pub modality: Modality,
    pub samples: u64,
    pub rows: u64,
    pub bytes: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: String,
    pub dir: PathBuf,
    pub started_at: Timestamp,
    pub stopped_at: Timestamp,
    pub streams: Vec<StreamSummary>,
    /// Bytes of all stream files, headers included.
    pub total_bytes: u64,
    pub bytes_per_minute: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub server_ts: Timestamp,
    /// Whether the sample was queued for the session file.
    pub recorded: bool,
}

#[derive(Debug, Default)]
struct SlotState {
    attached: bool,
    last_ts: Option<Timestamp>,
    first_ts: Option<Timestamp>,
    count: u64,
    /// `(server_ts, server_ts − source_ts)` of samples inside the health window.
    window: VecDeque<(i64, Option<i64>)>,
    recording: bool,
    queue: VecDeque<StampedSample>,
    dropped: u64,
}

#[derive(Debug)]
struct Slot {
    spec: StreamSpec,
    st: Mutex<SlotState>,
}

struct Recorder {
    stop: Sender<()>,
    handle: JoinHandle<Result<BTreeMap<String, StreamSummary>>>,
}

struct Control {
    phase: Phase,
    meta: Option<SessionMeta>,
    started_at: Option<Timestamp>,
    dir: Option<PathBuf>,
    session_specs: Vec<StreamSpec>,
    recorder: Option<Recorder>,
    last_summary: Option<SessionSummary>,
}

struct Inner {
    config: ServerConfig,
    clock: Arc<dyn Clock>,
    control: Mutex<Control>,
    streams: RwLock<BTreeMap<String, Arc<Slot>>>,
}

/// Shared handle to one acquisition server. Cheap to clone.
#[derive(Clone)]
pub struct Server {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Server {
    pub fn new(config: ServerConfig, clock: Arc<dyn Clock>) -> Self {
        Server {
            inner: Arc::new(Inner {
                config,
                clock,
                control: Mutex::new(Control {
                    phase: Phase::Idle,
                    meta: None,
                    started_at: None,
                    dir: None,
                    session_specs: Vec::new(),
                    recorder: None,
                    last_summary: None,
                }),
                streams: RwLock::new(BTreeMap::new()),
            }),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    pub fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }

    /// Accepts a stream for ingestion. A released stream with the same spec
    /// can be registered again.
    pub fn register_stream(&self, spec: StreamSpec) -> Result<()> {
        spec.validate()?;
        let mut ctl = lock(&self.inner.control);
        let mut map = self
            .inner
            .streams
            .write()
            .unwrap_or_else(|p| p.into_inner());
        if let Some((other, _)) = map
            .iter()
            .find(|(id, s)| **id != spec.stream_id && s.spec.modality == spec.modality)
        {
            return Err(CoreError::invalid(format!(
                "modality {} is already provided by stream `{other}`",
                spec.modality.as_str()
            ))
            .into());
        }
        let recording = ctl.phase == Phase::Recording;
        if let Some(slot) = map.get(&spec.stream_id) {
            let mut st = lock(&slot.st);
            if st.attached {
                return Err(CoreError::DuplicateStream(spec.stream_id).into());
            }
            if slot.spec == spec {
                st.attached = true;
                return Ok(());
            }
            if recording {
                return Err(CoreError::invalid(format!(
                    "stream `{}` is part of the running session with a different spec",
                    spec.stream_id
                ))
                .into());
            }
        }
        let slot = Slot {
            spec: spec.clone(),
            st: Mutex::new(SlotState {
                attached: true,
                recording,
                ..SlotState::default()
            }),
        };
        map.insert(spec.stream_id.clone(), Arc::new(slot));
        if recording {
            ctl.session_specs.push(spec.clone());
            log::info!("stream `{}` joined the running session", spec.stream_id);
        }
        Ok(())
    }

    /// Detaches a stream from its client. Outside a recording it is removed
    /// at once; during one it stays until the session stops.
    pub fn release_stream(&self, stream_id: &str) {
        let ctl = lock(&self.inner.control);
        let mut map = self
            .inner
            .streams
            .write()
            .unwrap_or_else(|p| p.into_inner());
        if let Some(slot) = map.get(stream_id) {
            lock(&slot.st).attached = false;
            if ctl.phase != Phase::Recording {
                map.remove(stream_id);
            }
        }
    }

    pub fn streams(&self) -> Vec<StreamSpec> {
        let map = self.inner.streams.read().unwrap_or_else(|p| p.into_inner());
        map.values().map(|s| s.spec.clone()).collect()
    }

    /// Stamps a sample on the server clock and, while recording, queues it for disk.
    pub fn ingest(
        &self,
        stream_id: &str,
        source_ts: Option<Timestamp>,
        mut payload: Payload,
    ) -> Result<Ack> {
        let slot = {
            let map = self.inner.streams.read().unwrap_or_else(|p| p.into_inner());
            map.get(stream_id)
                .cloned()
                .ok_or_else(|| ServerError::UnknownStream(stream_id.to_string()))?
        };
        if payload.modality() != slot.spec.modality {
            return Err(ServerError::ModalityMismatch {
                stream: stream_id.to_string(),
                expected: slot.spec.modality.as_str(),
                found: payload.modality().as_str(),
            });
        }
        payload.validate()?;
        canonicalize_payload(&mut payload)?;
        let cfg = &self.inner.config;
        let mut st = lock(&slot.st);
        let now = self.inner.clock.now();
        let server_ts = match st.last_ts {
            Some(last) if now <= last => last.add_nanos(1),
            _ => now,
        };
        st.last_ts = Some(server_ts);
        st.first_ts.get_or_insert(server_ts);
        st.count += 1;
        let latency = source_ts.map(|s| server_ts.as_nanos() - s.as_nanos());
        st.window.push_back((server_ts.as_nanos(), latency));
        let horizon = server_ts.as_nanos() - cfg.health_window_ns;
        while st.window.front().is_some_and(|(t, _)| *t <= horizon) {
            st.window.pop_front();
        }
        let recorded = st.recording;
        if recorded {
            if st.queue.len() >= cfg.queue_capacity {
                st.queue.pop_front();
                st.dropped += 1;
            }
            st.queue.push_back(StampedSample {
                stream_id: stream_id.to_string(),
                source_ts,
                server_ts,
                payload,
            });
        }
        Ok(Ack {
            server_ts,
            recorded,
        })
    }

    pub fn state(&self) -> SessionState {
        let ctl = lock(&self.inner.control);
        SessionState {
            phase: ctl.phase,
            meta: ctl.meta.clone(),
            started_at: ctl.started_at,
            session: ctl.meta.as_ref().map(SessionMeta::session_name),
        }
    }

    pub fn last_summary(&self) -> Option<SessionSummary> {
        lock(&self.inner.control).last_summary.clone()
    }

    /// Idle (or Stopped) → Recording: creates the session directory and manifest.
    pub fn start_session(&self, meta: SessionMeta) -> Result<SessionState> {
        meta.validate()?;
        let mut ctl = lock(&self.inner.control);
        if ctl.phase == Phase::Recording {
            return Err(ServerError::Phase("a session is already recording".into()));
        }
        let name = meta.session_name();
        let dir = self.inner.config.data_dir.join(&name);
        if dir.join(MANIFEST_FILE).exists() {
            return Err(CoreError::invalid(format!(
                "session {name} already exists in {}",
                dir.display()
            ))
            .into());
        }
        std::fs::create_dir_all(&dir)
            .map_err(|e| ServerError::io(format!("creating {}", dir.display()), e))?;
        let map = self.inner.streams.read().unwrap_or_else(|p| p.into_inner());
        let specs: Vec<StreamSpec> = map.values().map(|s| s.spec.clone()).collect();
        write_manifest(&meta, &specs, &dir.join(MANIFEST_FILE))?;

        let (stop_tx, stop_rx) = mpsc::channel();
        let inner = Arc::clone(&self.inner);
        let rec_dir = dir.clone();
        let handle = std::thread::Builder::new()
            .name("recorder".into())
            .spawn(move || record_loop(&inner, &rec_dir, &stop_rx))
            .map_err(|e| ServerError::io("spawning recorder", e))?;
        for slot in map.values() {
            let mut st = lock(&slot.st);
            st.recording = true;
            st.queue.clear();
            st.dropped = 0;
        }
        drop(map);
        if ctl.phase == Phase::Stopped {
            log::debug!("Stopped → Idle before starting {name}");
        }
        ctl.phase = Phase::Recording;
        ctl.started_at = Some(self.inner.clock.now());
        ctl.meta = Some(meta);
        ctl.dir = Some(dir);
        ctl.session_specs = specs;
        ctl.recorder = Some(Recorder {
            stop: stop_tx,
            handle,
        });
        log::info!("recording {name}");
        Ok(SessionState {
            phase: ctl.phase,
            meta: ctl.meta.clone(),
            started_at: ctl.started_at,
            session: Some(name),
        })
    }

    /// Recording → Stopped: flushes and closes every stream file.
    pub fn stop_session(&self) -> Result<SessionSummary> {
        let mut ctl = lock(&self.inner.control);
        if ctl.phase != Phase::Recording {
            return Err(ServerError::Phase(format!(
                "cannot stop while {:?}",
                ctl.phase
            )));
        }
        {
            let map = self.inner.streams.read().unwrap_or_else(|p| p.into_inner());
            for slot in map.values() {
                lock(&slot.st).recording = false;
            }
        }
        let stopped_at = self.inner.clock.now();
        ctl.phase = Phase::Stopped;
        let recorder = ctl
            .recorder
            .take()
            .expect("recording session has a recorder");
        let _ = recorder.stop.send(());
        let written = recorder
            .handle
            .join()
            .map_err(|_| ServerError::protocol("recorder thread panicked"))?;
        {
            let mut map = self
                .inner
                .streams
                .write()
                .unwrap_or_else(|p| p.into_inner());
            map.retain(|_, s| lock(&s.st).attached);
        }
        let written = written?;
        let meta = ctl.meta.clone().expect("recording session has metadata");
        let dir = ctl.dir.clone().expect("recording session has a directory");
        write_manifest(&meta, &ctl.session_specs, &dir.join(MANIFEST_FILE))?;
        let started_at = ctl.started_at.unwrap_or(stopped_at);
        let streams: Vec<StreamSummary> = ctl
            .session_specs
            .iter()
            .map(|spec| {
                written
                    .get(&spec.stream_id)
                    .cloned()
                    .unwrap_or(StreamSummary {
                        stream_id: spec.stream_id.clone(),
                        modality: spec.modality,
                        samples: 0,
                        rows: 0,
                        bytes: 0,
                        dropped: 0,
                    })
            })
            .collect();
        let total_bytes = streams.iter().map(|s| s.bytes).sum();
        let minutes = stopped_at.since(started_at).max(1) as f64 / (60.0 * NANOS_PER_SECOND as f64);
        let summary = SessionSummary {
            session: meta.session_name(),
            dir,
            started_at,
            stopped_at,
            streams,
            total_bytes,
            bytes_per_minute: total_bytes as f64 / minutes,
        };
        for s in &summary.streams {
            log::info!(
                "{}: {} samples, {} bytes, {} dropped",
                s.stream_id,
                s.samples,
                s.bytes,
                s.dropped
            );
        }
        ctl.last_summary = Some(summary.clone());
        Ok(summary)
    }

    /// Stops a running session, if any. Used on shutdown.
    pub fn shutdown(&self) -> Option<Result<SessionSummary>> {
        (self.state().phase == Phase::Recording).then(|| self.stop_session())
    }

    pub fn snapshot_health(&self) -> HealthSnapshot {
        let phase = lock(&self.inner.control).phase;
        let cfg = &self.inner.config;
        let map = self.inner.streams.read().unwrap_or_else(|p| p.into_inner());
        let now = self.inner.clock.now().as_nanos();
        let streams = map
            .values()
            .map(|slot| {
                let mut st = lock(&slot.st);
                let horizon = now - cfg.health_window_ns;
                while st.window.front().is_some_and(|(t, _)| *t <= horizon) {
                    st.window.pop_front();
                }
                let age = st.last_ts.map(|t| (now - t.as_nanos()).max(0));
                let stale = age.is_none_or(|a| a > cfg.stale_after_ns);
                let observed_rate_hz = match (stale, st.first_ts) {
                    (false, Some(first)) => {
                        let min_span = (NANOS_PER_SECOND as f64 / slot.spec.nominal_rate_hz) as i64;
                        let span =
                            (now - first.as_nanos()).clamp(min_span.max(1), cfg.health_window_ns);
                        st.window.len() as f64 * NANOS_PER_SECOND as f64 / span as f64
                    }
                    _ => 0.0,
                };
                let lat: Vec<i64> = st.window.iter().filter_map(|(_, l)| *l).collect();
                let mean_recording_latency_ms = (!lat.is_empty()).then(|| {
                    let sum: i128 = lat.iter().map(|&l| l as i128).sum();
                    (sum / lat.len() as i128) as f64 / 1e6
                });
                StreamHealth {
                    stream_id: slot.spec.stream_id.clone(),
                    modality: slot.spec.modality,
                    nominal_rate_hz: slot.spec.nominal_rate_hz,
                    observed_rate_hz,
                    last_sample_age_ms: age.map(|a| a as f64 / 1e6),
                    mean_recording_latency_ms,
                    sample_count: st.count,
                    dropped: st.dropped,
                    stale,
                }
            })
            .collect();
        HealthSnapshot {
            as_of_ns: Timestamp::from_nanos(now).unwrap_or(Timestamp::ZERO),
            phase,
            streams,
        }
    }
}

struct OpenFile {
    writer: StreamFileWriter<BufWriter<File>>,
    path: PathBuf,
    modality: Modality,
}

type Writers = BTreeMap<String, OpenFile>;

fn open_writer(dir: &Path, spec: &StreamSpec) -> Result<OpenFile> {
    let path = dir.join(spec.modality.file_name());
    let file = File::create(&path)
        .map_err(|e| ServerError::io(format!("creating {}", path.display()), e))?;
    let writer = StreamFileWriter::new(spec.modality, BufWriter::new(file))
        .map_err(|e| ServerError::io(format!("writing {}", path.display()), e))?;
    Ok(OpenFile {
        writer,
        path,
        modality: spec.modality,
    })
}

/// Moves queued samples to their stream files.
fn drain(
    inner: &Inner,
    dir: &Path,
    writers: &mut Writers,
    dropped: &mut BTreeMap<String, u64>,
) -> Result<()> {
    let slots: Vec<Arc<Slot>> = {
        let map = inner.streams.read().unwrap_or_else(|p| p.into_inner());
        map.values().cloned().collect()
    };
    for slot in slots {
        let (batch, d) = {
            let mut st = lock(&slot.st);
            (std::mem::take(&mut st.queue), st.dropped)
        };
        let id = &slot.spec.stream_id;
        if !writers.contains_key(id) {
            if batch.is_empty() && !lock(&slot.st).recording {
                continue;
            }
            writers.insert(id.clone(), open_writer(dir, &slot.spec)?);
        }
        dropped.insert(id.clone(), d);
        let f = writers.get_mut(id).expect("writer just inserted");
        for s in &batch {
            f.writer
                .write(s)
                .map_err(|e| ServerError::io(format!("writing {}", f.path.display()), e))?;
        }
    }
    Ok(())
}

fn record_loop(
    inner: &Inner,
    dir: &Path,
    stop: &Receiver<()>,
) -> Result<BTreeMap<String, StreamSummary>> {
    let mut writers = Writers::new();
    let mut dropped = BTreeMap::new();
    loop {
        let done = match stop.recv_timeout(inner.config.drain_interval) {
            Ok(()) | Err(RecvTimeoutError::Disconnected) => true,
            Err(RecvTimeoutError::Timeout) => false,
        };
        drain(inner, dir, &mut writers, &mut dropped)?;
        if done {
            break;
        }
    }
    let mut out = BTreeMap::new();
    for (
        id,
        OpenFile {
            writer: mut w,
            path,
            modality,
        },
    ) in writers
    {
        w.flush()
            .map_err(|e| ServerError::io(format!("flushing {}", path.display()), e))?;
        out.insert(
            id.clone(),
            StreamSummary {
                stream_id: id.clone(),
                modality,
                samples: w.samples,
                rows: w.rows,
                bytes: w.bytes,
                dropped: dropped.get(&id).copied().unwrap_or(0),
            },
        );
        let file = w
            .into_inner()
            .into_inner()
            .map_err(|e| ServerError::io("flushing", e.into_error()))?;
        file.sync_all()
            .map_err(|e| ServerError::io(format!("syncing {}", path.display()), e))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn meta() -> SessionMeta {
        SessionMeta {
            subject: "S1".into(),
            task: "peg".into(),
            trial: 1,
            master_frequency_hz: 30.0,
            pedal_mapping: vec![],
        }
    }

    fn video(k: u64) -> Payload {
        Payload::Video { frame_index: k }
    }

    #[test]
    fn stamping_is_strictly_increasing() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000));
        let s = Server::new(ServerConfig::new(dir.path()), clock.clone());
        s.register_stream(StreamSpec::new("video", Modality::VideoClock, 30.0, 1))
            .unwrap();
        let a = s.ingest("video", None, video(0)).unwrap();
        let b = s.ingest("video", None, video(1)).unwrap();
        assert_eq!(a.server_ts.as_nanos(), 1_000);
        assert_eq!(b.server_ts.as_nanos(), 1_001);
        assert!(!a.recorded);
    }

    #[test]
    fn queue_overflow_drops_oldest() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let mut cfg = ServerConfig::new(dir.path());
        cfg.queue_capacity = 3;
        cfg.drain_interval = Duration::from_secs(3600);
        let s = Server::new(cfg, clock.clone());
        s.register_stream(StreamSpec::new("video", Modality::VideoClock, 30.0, 1))
            .unwrap();
        s.start_session(meta()).unwrap();
        for k in 0..5 {
            clock.advance(1_000);
            s.ingest("video", None, video(k)).unwrap();
        }
        assert_eq!(s.snapshot_health().streams[0].dropped, 2);
        let sum = s.stop_session().unwrap();
        assert_eq!(sum.streams[0].samples, 3);
        assert_eq!(sum.streams[0].dropped, 2);
        let text = std::fs::read_to_string(sum.dir.join("video.csv")).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "3000,2");
    }
}
