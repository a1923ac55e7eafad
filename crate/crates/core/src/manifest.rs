//! `manifest.json`: per-session metadata and the list of recorded streams.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Modality, PedalMapping, SessionMeta, StreamSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subject: String,
    pub task: String,
    pub trial: u32,
    pub master_frequency_hz: f64,
    pub pedal_mapping: Vec<PedalMapping>,
    pub streams: Vec<StreamSpec>,
}

#[derive(Deserialize)]
struct RawStream {
    stream_id: String,
    modality: String,
    nominal_rate_hz: f64,
    channel_count: u32,
}

#[derive(Deserialize)]
struct RawManifest {
    subject: String,
    task: String,
    trial: u32,
    master_frequency_hz: f64,
    pedal_mapping: Vec<PedalMapping>,
    streams: Vec<RawStream>,
}

impl Manifest {
    pub fn new(meta: &SessionMeta, specs: &[StreamSpec]) -> Result<Self> {
        meta.validate()?;
        check_streams(specs)?;
        Ok(Manifest {
            subject: meta.subject.clone(),
            task: meta.task.clone(),
            trial: meta.trial,
            master_frequency_hz: meta.master_frequency_hz,
            pedal_mapping: meta.pedal_mapping.clone(),
            streams: specs.to_vec(),
        })
    }

    pub fn meta(&self) -> SessionMeta {
        SessionMeta {
            subject: self.subject.clone(),
            task: self.task.clone(),
            trial: self.trial,
            master_frequency_hz: self.master_frequency_hz,
            pedal_mapping: self.pedal_mapping.clone(),
        }
    }

    pub fn stream(&self, modality: Modality) -> Option<&StreamSpec> {
        self.streams.iter().find(|s| s.modality == modality)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let malformed = |message: String| Error::Malformed {
            path: origin.to_path_buf(),
            message,
        };
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let streams = raw
            .streams
            .into_iter()
            .map(|s| {
                Ok(StreamSpec {
                    modality: s.modality.parse()?,
                    stream_id: s.stream_id,
                    nominal_rate_hz: s.nominal_rate_hz,
                    channel_count: s.channel_count,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            subject: raw.subject,
            task: raw.task,
            trial: raw.trial,
            master_frequency_hz: raw.master_frequency_hz,
            pedal_mapping: raw.pedal_mapping,
            streams,
        };
        manifest
            .meta()
            .validate()
            .and_then(|_| check_streams(&manifest.streams))
            .map_err(|e| malformed(e.to_string()))?;
        Ok(manifest)
    }
}

fn check_streams(specs: &[StreamSpec]) -> Result<()> {
    let mut ids = HashSet::new();
    for spec in specs {
        spec.validate()?;
        if !ids.insert(spec.stream_id.as_str()) {
            return Err(Error::DuplicateStream(spec.stream_id.clone()));
        }
    }
    Ok(())
}

/// Writes `manifest.json` at `path` (a file path) and returns the document.
pub fn write_manifest(meta: &SessionMeta, specs: &[StreamSpec], path: &Path) -> Result<Manifest> {
    let manifest = Manifest::new(meta, specs)?;
    write_atomic(path, manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

pub fn parse_manifest(path: &Path) -> Result<(SessionMeta, Vec<StreamSpec>)> {
    let m = read_manifest(path)?;
    Ok((m.meta(), m.streams))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::from_json(&text, path)
}
