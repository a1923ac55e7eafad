//! Simulated acquisition clients: push the four sensor streams of a
//! scenario through the ingestion socket and drive a session over the
//! control socket.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;
use synchrodaq_core::align::write_labels_csv;
use synchrodaq_core::io::{create_dir_all, write_json};
use synchrodaq_core::model::{Modality, SessionMeta, StreamSpec, Timestamp};
use synchrodaq_core::pipeline::{labels_path, scenario_path};
use synchrodaq_core::sim::{all_streams, stream_id_for, GroundTruthScenario, SimSample};

use crate::clock::wall_now_ns;
use crate::error::{Result, ServerError};
use crate::server::SessionSummary;
use crate::wire::{ControlClient, IngestClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientMode {
    /// Each stream paced on the wall clock by its own thread.
    Realtime,
    /// As fast as acks allow, in global send order.
    Replay,
}

impl FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "realtime" => Ok(ClientMode::Realtime),
            "replay" => Ok(ClientMode::Replay),
            other => Err(format!("unknown client mode `{other}` (realtime|replay)")),
        }
    }
}

/// Stream declarations for a scenario's simulated devices.
pub fn stream_specs(s: &GroundTruthScenario) -> Vec<StreamSpec> {
    let c = &s.config;
    let spec = |m: Modality, rate: f64, channels: usize| {
        StreamSpec::new(stream_id_for(m), m, rate, channels as u32)
    };
    vec![
        spec(Modality::EmTracker, c.em.rate_hz, 4),
        spec(Modality::HandKeypoints, c.keypoints.rate_hz, 2),
        spec(Modality::PedalFsr, c.pss.rate_hz, c.pss.channels.len()),
        spec(Modality::VideoClock, c.video.rate_hz, 1),
    ]
}

fn source_ts(ns: i64) -> Result<Timestamp> {
    Ok(Timestamp::from_nanos(ns)?)
}

fn send_one(client: &mut IngestClient, id: &str, s: &SimSample, ts_ns: i64) -> Result<bool> {
    let ts = if s.has_source_ts {
        Some(source_ts(ts_ns)?)
    } else {
        None
    };
    Ok(client.send(id, ts, &s.payload)?.recorded.unwrap_or(false))
}

/// Sends every sample of `streams` (one vector per spec, same order) and
/// returns how many each stream sent. `cancel` stops early.
pub fn run_clients(
    ingest: SocketAddr,
    specs: &[StreamSpec],
    streams: Vec<Vec<SimSample>>,
    mode: ClientMode,
    cancel: Option<&AtomicBool>,
) -> Result<BTreeMap<String, usize>> {
    if specs.len() != streams.len() {
        return Err(ServerError::protocol(
            "one sample stream per spec is required",
        ));
    }
    let cancelled = || cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    let mut clients = Vec::new();
    for spec in specs {
        let mut c = IngestClient::connect(ingest)?;
        c.register(spec)?;
        clients.push(c);
    }
    let mut sent = BTreeMap::new();
    match mode {
        ClientMode::Replay => {
            let mut order: Vec<(i64, usize, usize)> = streams
                .iter()
                .enumerate()
                .flat_map(|(k, st)| st.iter().enumerate().map(move |(i, s)| (s.send_ns(), k, i)))
                .collect();
            order.sort_unstable();
            let mut counts = vec![0usize; specs.len()];
            for (_, k, i) in order {
                if cancelled() {
                    break;
                }
                let s = &streams[k][i];
                // Compressed time: keep the transmission delay, drop the waiting.
                send_one(
                    &mut clients[k],
                    &specs[k].stream_id,
                    s,
                    wall_now_ns() - s.latency_ns,
                )?;
                counts[k] += 1;
            }
            for (spec, n) in specs.iter().zip(counts) {
                sent.insert(spec.stream_id.clone(), n);
            }
        }
        ClientMode::Realtime => {
            let start = Instant::now();
            let wall_start = wall_now_ns();
            let results: Vec<Result<usize>> = thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .zip(specs)
                    .zip(&streams)
                    .map(|((client, spec), samples)| {
                        scope.spawn(move || -> Result<usize> {
                            let mut n = 0;
                            for s in samples {
                                if cancelled() {
                                    break;
                                }
                                let due = start + Duration::from_nanos(s.send_ns().max(0) as u64);
                                let now = Instant::now();
                                if due > now {
                                    thread::sleep(due - now);
                                }
                                send_one(client, &spec.stream_id, s, wall_start + s.acquired_ns)?;
                                n += 1;
                            }
                            Ok(n)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(ServerError::protocol("client thread panicked"))
                        })
                    })
                    .collect()
            });
            for (spec, r) in specs.iter().zip(results) {
                sent.insert(spec.stream_id.clone(), r?);
            }
        }
    }
    Ok(sent)
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub summary: SessionSummary,
    pub sent: BTreeMap<String, usize>,
}

/// Runs one complete recorded trial: register, start, stream, stop. With
/// `gt_dir` the scenario and its gesture labels are written there under the
/// session name.
pub fn run_trial(
    control: SocketAddr,
    ingest: SocketAddr,
    scenario: &GroundTruthScenario,
    meta: &SessionMeta,
    mode: ClientMode,
    gt_dir: Option<&Path>,
    cancel: Option<&AtomicBool>,
) -> Result<TrialRun> {
    let streams = all_streams(scenario)?;
    let specs = stream_specs(scenario);
    let mut ctl = ControlClient::connect(control)?;
    let started = ctl.command(&json!({ "cmd": "start_session", "meta": meta }))?;
    let session = started["session"].as_str().unwrap_or_default().to_string();
    log::info!("recording {session} ({mode:?})");
    let sent = run_clients(ingest, &specs, streams, mode, cancel);
    let stopped = ctl.command(&json!({ "cmd": "stop_session" }))?;
    let sent = sent?;
    let summary: SessionSummary = serde_json::from_value(stopped["summary"].clone())
        .map_err(|e| ServerError::protocol(format!("bad session summary: {e}")))?;
    let cancelled = cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    for st in &summary.streams {
        let expected = sent.get(&st.stream_id).copied().unwrap_or(0) as u64;
        if st.samples + st.dropped != expected && !cancelled {
            return Err(ServerError::protocol(format!(
                "stream {} recorded {} of {expected} samples",
                st.stream_id, st.samples
            )));
        }
    }
    if let Some(dir) = gt_dir {
        create_dir_all(dir)?;
        write_json(&scenario_path(dir, &summary.session), scenario)?;
        write_labels_csv(&labels_path(dir, &summary.session), &scenario.gestures)?;
    }
    Ok(TrialRun { summary, sent })
}

/// Session metadata for a simulated trial.
pub fn sim_meta(
    scenario: &GroundTruthScenario,
    subject: &str,
    task: &str,
    trial: u32,
) -> SessionMeta {
    SessionMeta {
        subject: subject.into(),
        task: task.into(),
        trial,
        master_frequency_hz: scenario.config.video.rate_hz,
        pedal_mapping: scenario.config.pedal_mapping.clone(),
    }
}
