//! On-disk session recordings: one CSV per modality plus `manifest.json`.
//!
//! Each sample expands to one row per payload entry (sensor, keypoint or
//! pedal channel). Entries within a sample are written in strictly increasing
//! key order, which is how the reader regroups rows into samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::{read_manifest, Manifest, MANIFEST_FILE};
use crate::model::{
    Hand, Keypoint, Modality, Payload, PedalReading, Pose6Dof, SensorPose, StampedSample, Timestamp,
};

pub fn csv_header(modality: Modality) -> &'static str {
    match modality {
        Modality::EmTracker => {
            "server_ts_ns,source_ts_ns,sensor_id,x_cm,y_cm,z_cm,azimuth_deg,elevation_deg,roll_deg"
        }
        Modality::HandKeypoints => "server_ts_ns,source_ts_ns,hand,keypoint_id,x_m,y_m,z_m,valid",
        Modality::PedalFsr => "server_ts_ns,source_ts_ns,channel,voltage_v,state",
        Modality::VideoClock => "server_ts_ns,frame_index",
    }
}

/// Sorts payload entries into the canonical on-disk order and rejects
/// payloads that could not be regrouped on read (empty, or repeated keys).
pub fn canonicalize_payload(payload: &mut Payload) -> Result<()> {
    fn check<K: Ord + Copy + std::fmt::Debug>(keys: impl Iterator<Item = K>) -> Result<()> {
        let keys: Vec<K> = keys.collect();
        if keys.is_empty() {
            return Err(Error::invalid("empty payload"));
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("repeated payload keys {keys:?}")));
        }
        Ok(())
    }
    match payload {
        Payload::Em(poses) => {
            poses.sort_by_key(|p| p.sensor_id);
            check(poses.iter().map(|p| p.sensor_id))
        }
        Payload::Keypoints(kps) => {
            kps.sort_by_key(|k| (k.hand, k.keypoint_id));
            check(kps.iter().map(|k| (k.hand, k.keypoint_id)))
        }
        Payload::Pss(readings) => {
            readings.sort_by_key(|r| r.channel);
            check(readings.iter().map(|r| r.channel))
        }
        Payload::Video { .. } => Ok(()),
    }
}

fn opt_ts(ts: Option<Timestamp>) -> String {
    ts.map(|t| t.as_nanos().to_string()).unwrap_or_default()
}

/// Formats the CSV rows for one sample (no header).
pub fn format_rows(sample: &StampedSample) -> String {
    let mut out = String::new();
    let server = sample.server_ts.as_nanos();
    let source = opt_ts(sample.source_ts);
    match &sample.payload {
        Payload::Em(poses) => {
            for sp in poses {
                let [x, y, z] = sp.pose.position;
                let [a, e, r] = sp.pose.orientation;
                let _ = writeln!(
                    out,
                    "{server},{source},{},{x},{y},{z},{a},{e},{r}",
                    sp.sensor_id
                );
            }
        }
        Payload::Keypoints(kps) => {
            for k in kps {
                let [x, y, z] = k.position_m;
                let _ = writeln!(
                    out,
                    "{server},{source},{},{},{x},{y},{z},{}",
                    k.hand.as_str(),
                    k.keypoint_id,
                    u8::from(k.valid)
                );
            }
        }
        Payload::Pss(readings) => {
            for r in readings {
                let _ = writeln!(
                    out,
                    "{server},{source},{},{},{}",
                    r.channel, r.voltage, r.state
                );
            }
        }
        Payload::Video { frame_index } => {
            let _ = writeln!(out, "{server},{frame_index}");
        }
    }
    out
}

/// Buffered writer for one stream file. Tracks rows, samples and bytes written.
pub struct StreamFileWriter<W: Write> {
    modality: Modality,
    inner: W,
    pub samples: u64,
    pub rows: u64,
    pub bytes: u64,
}

impl<W: Write> StreamFileWriter<W> {
    pub fn new(modality: Modality, mut inner: W) -> io::Result<Self> {
        let header = format!("{}\n", csv_header(modality));
        inner.write_all(header.as_bytes())?;
        Ok(StreamFileWriter {
            modality,
            inner,
            samples: 0,
            rows: 0,
            bytes: header.len() as u64,
        })
    }

    pub fn write(&mut self, sample: &StampedSample) -> io::Result<()> {
        debug_assert_eq!(sample.payload.modality(), self.modality);
        let text = format_rows(sample);
        self.inner.write_all(text.as_bytes())?;
        self.samples += 1;
        self.rows += text.lines().count() as u64;
        self.bytes += text.len() as u64;
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// A recorded session read back from disk.
#[derive(Debug, Clone)]
pub struct RecordedSession {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub streams: BTreeMap<Modality, Vec<StampedSample>>,
}

impl RecordedSession {
    pub fn name(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.manifest.meta().session_name())
    }

    pub fn samples(&self, modality: Modality) -> &[StampedSample] {
        self.streams
            .get(&modality)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn parse_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    }
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    path: &Path,
    line: u64,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec
        .get(i)
        .ok_or_else(|| parse_err(path, line, format!("missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|e| parse_err(path, line, format!("column {i} `{raw}`: {e}")))
}

fn opt_field(
    rec: &csv::StringRecord,
    i: usize,
    path: &Path,
    line: u64,
) -> Result<Option<Timestamp>> {
    match rec.get(i).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => Ok(Some(Timestamp::from_nanos(field(rec, i, path, line)?)?)),
    }
}

/// Reads one stream file back into samples.
pub fn read_stream_file(
    path: &Path,
    modality: Modality,
    stream_id: &str,
) -> Result<Vec<StampedSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let expected: Vec<&str> = csv_header(modality).split(',').collect();
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(path, 1, "unexpected header"));
    }

    let mut out: Vec<StampedSample> = Vec::new();
    // Key of the last entry appended to the open sample; a key that does not
    // increase starts a new sample.
    let mut last_key: Option<(u8, u8)> = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = idx as u64 + 2;
        let server_ts = Timestamp::from_nanos(field(&rec, 0, path, line)?)?;
        let (source_ts, key, entry) = match modality {
            Modality::EmTracker => {
                let sensor_id: u8 = field(&rec, 2, path, line)?;
                let mut v = [0.0; 6];
                for (j, slot) in v.iter_mut().enumerate() {
                    *slot = field(&rec, 3 + j, path, line)?;
                }
                let pose = Pose6Dof::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
                    .map_err(|e| parse_err(path, line, e))?;
                (
                    opt_field(&rec, 1, path, line)?,
                    (0, sensor_id),
                    Entry::Em(SensorPose { sensor_id, pose }),
                )
            }
            Modality::HandKeypoints => {
                let hand: Hand = rec
                    .get(2)
                    .unwrap_or("")
                    .parse()
                    .map_err(|e| parse_err(path, line, e))?;
                let keypoint_id: u8 = field(&rec, 3, path, line)?;
                let valid: u8 = field(&rec, 7, path, line)?;
                let kp = Keypoint {
                    hand,
                    keypoint_id,
                    position_m: [
                        field(&rec, 4, path, line)?,
                        field(&rec, 5, path, line)?,
                        field(&rec, 6, path, line)?,
                    ],
                    valid: valid != 0,
                };
                (
                    opt_field(&rec, 1, path, line)?,
                    (hand as u8, keypoint_id),
                    Entry::Kp(kp),
                )
            }
            Modality::PedalFsr => {
                let r = PedalReading {
                    channel: field(&rec, 2, path, line)?,
                    voltage: field(&rec, 3, path, line)?,
                    state: field(&rec, 4, path, line)?,
                };
                r.validate().map_err(|e| parse_err(path, line, e))?;
                (
                    opt_field(&rec, 1, path, line)?,
                    (0, r.channel),
                    Entry::Pss(r),
                )
            }
            Modality::VideoClock => {
                let frame_index: u64 = field(&rec, 1, path, line)?;
                out.push(StampedSample {
                    stream_id: stream_id.to_string(),
                    source_ts: None,
                    server_ts,
                    payload: Payload::Video { frame_index },
                });
                continue;
            }
        };

        let continues = match (out.last(), last_key) {
            (Some(prev), Some(k)) => {
                prev.server_ts == server_ts && prev.source_ts == source_ts && key > k
            }
            _ => false,
        };
        if continues {
            let prev = out.last_mut().expect("open sample");
            match (&mut prev.payload, entry) {
                (Payload::Em(v), Entry::Em(e)) => v.push(e),
                (Payload::Keypoints(v), Entry::Kp(e)) => v.push(e),
                (Payload::Pss(v), Entry::Pss(e)) => v.push(e),
                _ => unreachable!("one modality per file"),
            }
        } else {
            out.push(StampedSample {
                stream_id: stream_id.to_string(),
                source_ts,
                server_ts,
                payload: match entry {
                    Entry::Em(e) => Payload::Em(vec![e]),
                    Entry::Kp(e) => Payload::Keypoints(vec![e]),
                    Entry::Pss(e) => Payload::Pss(vec![e]),
                },
            });
        }
        last_key = Some(key);
    }
    Ok(out)
}

enum Entry {
    Em(SensorPose),
    Kp(Keypoint),
    Pss(PedalReading),
}

/// Reads `manifest.json` and every stream file it lists.
pub fn read_session(dir: &Path) -> Result<RecordedSession> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::io(
            &manifest_path,
            io::Error::new(
                io::ErrorKind::NotFound,
                "no manifest.json in session directory",
            ),
        ));
    }
    let manifest = read_manifest(&manifest_path)?;
    let mut streams = BTreeMap::new();
    for spec in &manifest.streams {
        let path = dir.join(spec.modality.file_name());
        let samples = if path.exists() {
            read_stream_file(&path, spec.modality, &spec.stream_id)?
        } else {
            Vec::new()
        };
        streams.insert(spec.modality, samples);
    }
    Ok(RecordedSession {
        dir: dir.to_path_buf(),
        manifest,
        streams,
    })
}

/// Session directories directly under `root` (or `root` itself if it is one), sorted by name.
pub fn find_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
