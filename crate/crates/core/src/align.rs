//! Alignment of a recorded session onto the video frame clock.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_json, read_to_string, write_atomic, write_json};
use crate::metrics::unwrap_degrees;
use crate::model::{
    tick_nanos, wrap_degrees, GestureSegment, Hand, Modality, Payload, StampedSample, Timestamp,
    EM_SENSOR_IDS, KEYPOINT_INDEX_TIP, KEYPOINT_THUMB_TIP, NANOS_PER_SECOND,
};
use crate::recording::RecordedSession;
use crate::spline::CubicSpline;

pub const BACKGROUND_LABEL: &str = "BG";
pub const DEFAULT_PEDAL_THRESHOLD_V: f64 = 2.5;
pub const DEFAULT_MAX_SPLINE_GAP_NS: i64 = NANOS_PER_SECOND;
/// Valid samples used on each side of a gap when fitting the spline.
const SPLINE_NEIGHBORS: usize = 3;

pub const EM_FIELDS: [&str; 6] = [
    "x_cm",
    "y_cm",
    "z_cm",
    "azimuth_deg",
    "elevation_deg",
    "roll_deg",
];
pub const KEYPOINT_FIELDS: [&str; 6] = [
    "thumb_x_cm",
    "thumb_y_cm",
    "thumb_z_cm",
    "index_x_cm",
    "index_y_cm",
    "index_z_cm",
];
pub const PSS_FIELDS: [&str; 2] = ["voltage_v", "state"];

/// Video frame times with their frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Timebase {
    pub times: Vec<Timestamp>,
    pub frame_index: Vec<u64>,
}

/// Frame times from the video clock stream, collapsing repeated timestamps.
pub fn build_timebase(video: &[StampedSample]) -> Result<Timebase> {
    let mut times: Vec<Timestamp> = Vec::with_capacity(video.len());
    let mut frame_index = Vec::with_capacity(video.len());
    let mut dropped = 0;
    for s in video {
        let Payload::Video { frame_index: k } = s.payload else {
            return Err(Error::invalid("non-video sample on the video clock"));
        };
        match times.last() {
            Some(&last) if s.server_ts == last => dropped += 1,
            Some(&last) if s.server_ts < last => {
                return Err(Error::invalid("video clock is not sorted by server time"));
            }
            _ => {
                times.push(s.server_ts);
                frame_index.push(k);
            }
        }
    }
    if dropped > 0 {
        log::warn!("collapsed {dropped} duplicate video timestamps");
    }
    if times.len() < 2 {
        return Err(Error::invalid(format!(
            "timebase needs at least 2 video frames, got {}",
            times.len()
        )));
    }
    Ok(Timebase { times, frame_index })
}

/// For each frame time, the index of the latest sample stamped at or before it.
pub fn associate(
    sample_times: &[Timestamp],
    frame_times: &[Timestamp],
) -> Result<Vec<Option<usize>>> {
    if sample_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("stream is not sorted by server time"));
    }
    let mut out = Vec::with_capacity(frame_times.len());
    let mut j = 0;
    let mut last_frame: Option<Timestamp> = None;
    for &t in frame_times {
        if last_frame.is_some_and(|l| t < l) {
            j = 0;
        }
        last_frame = Some(t);
        while j < sample_times.len() && sample_times[j] <= t {
            j += 1;
        }
        out.push(j.checked_sub(1));
    }
    Ok(out)
}

/// Fills missing entries: interior gaps whose flanking valid samples are at
/// most `max_spline_gap_ns` apart get a not-a-knot cubic spline through up
/// to three valid neighbors per side; longer and trailing gaps are
/// forward-filled, leading gaps back-filled. Valid entries are never changed.
pub fn fill_gaps(
    values: &[f64],
    missing: &[bool],
    times: &[Timestamp],
    max_spline_gap_ns: i64,
) -> Result<Vec<f64>> {
    if values.len() != missing.len() || values.len() != times.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: missing.len().min(times.len()),
        });
    }
    let valid: Vec<usize> = (0..values.len()).filter(|&i| !missing[i]).collect();
    if valid.is_empty() {
        return Err(Error::invalid("column has no valid samples"));
    }
    let mut out = values.to_vec();
    let t0 = times[0].as_nanos();
    let secs = |i: usize| (times[i].as_nanos() - t0) as f64 / NANOS_PER_SECOND as f64;
    let first = valid[0];
    let last = valid[valid.len() - 1];
    out[..first].iter_mut().for_each(|v| *v = values[first]);
    out[last + 1..].iter_mut().for_each(|v| *v = values[last]);
    for w in 0..valid.len() - 1 {
        let (a, b) = (valid[w], valid[w + 1]);
        if b == a + 1 {
            continue;
        }
        if times[b].since(times[a]) <= max_spline_gap_ns {
            let lo = w.saturating_sub(SPLINE_NEIGHBORS - 1);
            let hi = (w + 1 + SPLINE_NEIGHBORS).min(valid.len());
            let knots = &valid[lo..hi];
            let x: Vec<f64> = knots.iter().map(|&i| secs(i)).collect();
            let y: Vec<f64> = knots.iter().map(|&i| values[i]).collect();
            let s = CubicSpline::not_a_knot(&x, &y)?;
            for (i, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
                *v = s.eval(secs(i));
            }
        } else {
            out[a + 1..b].iter_mut().for_each(|v| *v = values[a]);
        }
    }
    Ok(out)
}

/// Zero-order hold fill: forward-fill, with leading gaps back-filled.
pub fn hold_fill(values: &[f64], missing: &[bool]) -> Result<Vec<f64>> {
    let first = missing
        .iter()
        .position(|m| !m)
        .ok_or_else(|| Error::invalid("column has no valid samples"))?;
    let mut out = values.to_vec();
    let mut current = values[first];
    for i in 0..out.len() {
        if missing[i] {
            out[i] = current;
        } else {
            current = values[i];
        }
    }
    Ok(out)
}

/// Several same-source columns sharing one missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnGroup {
    pub name: String,
    pub fields: Vec<String>,
    /// `values[field][frame]`.
    pub values: Vec<Vec<f64>>,
    pub missing: Vec<bool>,
}

impl ColumnGroup {
    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields
            .iter()
            .position(|f| f == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.fields
            .iter()
            .map(|f| format!("{}_{}", self.name, f))
            .chain(std::iter::once(format!("{}_missing", self.name)))
            .collect()
    }

    fn select(&self, keep: &[usize]) -> ColumnGroup {
        ColumnGroup {
            name: self.name.clone(),
            fields: self.fields.clone(),
            values: self
                .values
                .iter()
                .map(|v| keep.iter().map(|&i| v[i]).collect())
                .collect(),
            missing: keep.iter().map(|&i| self.missing[i]).collect(),
        }
    }
}

/// Per-video-frame table joining every modality and the gesture labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTrial {
    pub name: String,
    pub rate_hz: f64,
    pub frame_times: Vec<Timestamp>,
    pub frame_index: Vec<u64>,
    pub groups: Vec<ColumnGroup>,
    pub labels: Vec<String>,
}

impl AlignedTrial {
    pub fn len(&self) -> usize {
        self.frame_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&ColumnGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens_ok = self.frame_index.len() == n
            && self.labels.len() == n
            && self.groups.iter().all(|g| {
                g.missing.len() == n
                    && g.values.len() == g.fields.len()
                    && g.values.iter().all(|v| v.len() == n)
            });
        if !lens_ok {
            return Err(Error::invalid(format!(
                "trial {}: column lengths differ from frame count",
                self.name
            )));
        }
        if self.frame_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "trial {}: frame times not strictly increasing",
                self.name
            )));
        }
        Ok(())
    }

    fn select(&self, keep: &[usize]) -> AlignedTrial {
        AlignedTrial {
            name: self.name.clone(),
            rate_hz: self.rate_hz,
            frame_times: keep.iter().map(|&i| self.frame_times[i]).collect(),
            frame_index: keep.iter().map(|&i| self.frame_index[i]).collect(),
            groups: self.groups.iter().map(|g| g.select(keep)).collect(),
            labels: keep.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Trial-relative video time of each frame, `frame_index / rate`.
    pub fn video_times(&self) -> Vec<Timestamp> {
        video_times(&self.frame_index, self.rate_hz)
    }
}

fn video_times(frame_index: &[u64], rate_hz: f64) -> Vec<Timestamp> {
    frame_index
        .iter()
        .map(|&k| Timestamp::from_nanos(tick_nanos(k, rate_hz)).expect("non-negative tick"))
        .collect()
}

/// Keeps frames 0, s, 2s, … where `s = rate / target_rate` must be an integer.
pub fn resample(trial: &AlignedTrial, target_rate_hz: f64) -> Result<AlignedTrial> {
    if !(target_rate_hz.is_finite() && target_rate_hz > 0.0) {
        return Err(Error::invalid("target rate must be > 0"));
    }
    let ratio = trial.rate_hz / target_rate_hz;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::invalid(format!(
            "{} Hz → {target_rate_hz} Hz is not an integer stride",
            trial.rate_hz
        )));
    }
    let keep: Vec<usize> = (0..trial.len()).step_by(stride as usize).collect();
    let mut out = trial.select(&keep);
    out.rate_hz = target_rate_hz;
    Ok(out)
}

fn check_overlaps(segments: &[GestureSegment]) -> Result<Vec<&GestureSegment>> {
    let mut sorted: Vec<&GestureSegment> = segments.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::invalid(format!(
                "gesture segments `{}` [{}, {}) and `{}` [{}, {}) overlap",
                w[0].label, w[0].start, w[0].end, w[1].label, w[1].start, w[1].end
            )));
        }
    }
    Ok(sorted)
}

/// Frame-level labels: `L` where the time lies in `[start, end)` of a segment, else `BG`.
pub fn expand_labels(segments: &[GestureSegment], times: &[Timestamp]) -> Result<Vec<String>> {
    let sorted = check_overlaps(segments)?;
    Ok(times
        .iter()
        .map(|&t| {
            let i = sorted.partition_point(|s| s.start <= t);
            match i.checked_sub(1).map(|i| sorted[i]) {
                Some(s) if t < s.end => s.label.clone(),
                _ => BACKGROUND_LABEL.to_string(),
            }
        })
        .collect())
}

/// Inverse of [`expand_labels`] on the given timebase: runs of one non-background
/// label become `[first frame time, next frame time)`; a run reaching the last
/// frame ends 1 ns after it.
pub fn labels_to_segments(labels: &[String], times: &[Timestamp]) -> Result<Vec<GestureSegment>> {
    if labels.len() != times.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: times.len(),
        });
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i + 1;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if labels[i] != BACKGROUND_LABEL {
            let end = if j < labels.len() {
                times[j]
            } else {
                times[j - 1].add_nanos(1)
            };
            out.push(GestureSegment::new(labels[i].clone(), times[i], end)?);
        }
        i = j;
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LabelRow {
    label: String,
    start_s: f64,
    end_s: f64,
}

/// Reads `label,start_s,end_s` rows (seconds from trial start).
pub fn read_labels_csv(path: &Path) -> Result<Vec<GestureSegment>> {
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.push(GestureSegment::new(
            row.label,
            Timestamp::from_secs_f64(row.start_s)?,
            Timestamp::from_secs_f64(row.end_s)?,
        )?);
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, segments: &[GestureSegment]) -> Result<()> {
    let mut s = String::from("label,start_s,end_s\n");
    for g in segments {
        let _ = writeln!(
            s,
            "{},{},{}",
            g.label,
            g.start.as_secs_f64(),
            g.end.as_secs_f64()
        );
    }
    write_atomic(path, s.as_bytes())
}

/// Drops frames where the clutch pedal is pressed and adds a `clutch` group
/// carrying the (released) clutch state on the surviving frames.
pub fn mask_clutch(trial: &AlignedTrial, clutch_channel: u8) -> Result<AlignedTrial> {
    let name = format!("pss{clutch_channel}");
    let state = trial
        .group(&name)
        .and_then(|g| g.field("state"))
        .ok_or_else(|| Error::invalid(format!("trial has no pedal channel {clutch_channel}")))?;
    let keep: Vec<usize> = (0..trial.len()).filter(|&i| state[i] < 0.5).collect();
    if keep.is_empty() {
        log::warn!("{}: every frame is clutched; trial is empty", trial.name);
    }
    let mut out = trial.select(&keep);
    out.groups.push(ColumnGroup {
        name: "clutch".into(),
        fields: vec!["state".into()],
        values: vec![keep.iter().map(|&i| state[i]).collect()],
        missing: vec![false; keep.len()],
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOptions {
    /// Per-channel pedal thresholds; channels not listed use `default_threshold_v`.
    pub pedal_thresholds: BTreeMap<u8, f64>,
    pub default_threshold_v: f64,
    pub max_spline_gap_ns: i64,
    pub labels: Vec<GestureSegment>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            pedal_thresholds: BTreeMap::new(),
            default_threshold_v: DEFAULT_PEDAL_THRESHOLD_V,
            max_spline_gap_ns: DEFAULT_MAX_SPLINE_GAP_NS,
            labels: Vec::new(),
        }
    }
}

fn server_times(samples: &[StampedSample]) -> Vec<Timestamp> {
    samples.iter().map(|s| s.server_ts).collect()
}

/// Group built from per-frame optional rows, gap-filled with `fill`.
fn group_from_rows(
    name: String,
    fields: &[&str],
    rows: Vec<Option<Vec<f64>>>,
    fill: impl Fn(&[f64], &[bool]) -> Result<Vec<f64>>,
) -> Result<Option<ColumnGroup>> {
    let missing: Vec<bool> = rows.iter().map(Option::is_none).collect();
    if missing.iter().all(|&m| m) {
        return Ok(None);
    }
    let mut values = Vec::with_capacity(fields.len());
    for f in 0..fields.len() {
        let raw: Vec<f64> = rows
            .iter()
            .map(|r| r.as_ref().map_or(0.0, |r| r[f]))
            .collect();
        values.push(fill(&raw, &missing)?);
    }
    Ok(Some(ColumnGroup {
        name,
        fields: fields.iter().map(|f| f.to_string()).collect(),
        values,
        missing,
    }))
}

/// Angle columns are unwrapped before gap filling and wrapped again afterwards.
fn fill_angles(
    raw: &[f64],
    missing: &[bool],
    times: &[Timestamp],
    max_gap: i64,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..raw.len()).filter(|&i| !missing[i]).collect();
    let unwrapped = unwrap_degrees(&idx.iter().map(|&i| raw[i]).collect::<Vec<_>>());
    let mut v = raw.to_vec();
    for (k, &i) in idx.iter().enumerate() {
        v[i] = unwrapped[k];
    }
    Ok(fill_gaps(&v, missing, times, max_gap)?
        .into_iter()
        .map(wrap_degrees)
        .collect())
}

/// Aligns every stream of a recorded session onto its video frame clock.
pub fn align_session(session: &RecordedSession, opts: &AlignOptions) -> Result<AlignedTrial> {
    let tb = build_timebase(session.samples(Modality::VideoClock))?;
    let rate = session.manifest.master_frequency_hz;
    let times = &tb.times;
    // Gap lengths are measured on the video clock, which replayed sessions keep
    // even when server time is compressed.
    let vt = video_times(&tb.frame_index, rate);
    let mut groups = Vec::new();

    let em = session.samples(Modality::EmTracker);
    if !em.is_empty() {
        let assoc = associate(&server_times(em), times)?;
        for id in EM_SENSOR_IDS {
            let rows = assoc
                .iter()
                .map(|a| {
                    let Payload::Em(poses) = &em[(*a)?].payload else {
                        return None;
                    };
                    poses.iter().find(|p| p.sensor_id == id).map(|p| {
                        p.pose
                            .position
                            .iter()
                            .chain(&p.pose.orientation)
                            .copied()
                            .collect()
                    })
                })
                .collect();
            let max_gap = opts.max_spline_gap_ns;
            // Filled per field below since angles need unwrapping first.
            if let Some(mut g) = group_from_rows(format!("em{id}"), &EM_FIELDS, rows, |raw, _| {
                Ok(raw.to_vec())
            })? {
                for (f, col) in g.values.iter_mut().enumerate() {
                    *col = if f >= 3 {
                        fill_angles(col, &g.missing, &vt, max_gap)?
                    } else {
                        fill_gaps(col, &g.missing, &vt, max_gap)?
                    };
                }
                groups.push(g);
            }
        }
    }

    let kp = session.samples(Modality::HandKeypoints);
    if !kp.is_empty() {
        let assoc = associate(&server_times(kp), times)?;
        for hand in Hand::BOTH {
            let rows = assoc
                .iter()
                .map(|a| {
                    let Payload::Keypoints(kps) = &kp[(*a)?].payload else {
                        return None;
                    };
                    let get = |id| {
                        kps.iter()
                            .find(|k| k.hand == hand && k.keypoint_id == id && k.valid)
                    };
                    let (thumb, index) = (get(KEYPOINT_THUMB_TIP)?, get(KEYPOINT_INDEX_TIP)?);
                    Some(
                        thumb
                            .position_m
                            .iter()
                            .chain(&index.position_m)
                            .map(|m| m * 100.0)
                            .collect(),
                    )
                })
                .collect();
            let max_gap = opts.max_spline_gap_ns;
            if let Some(g) = group_from_rows(
                format!("kp_{}", hand.as_str()),
                &KEYPOINT_FIELDS,
                rows,
                |raw, missing| fill_gaps(raw, missing, &vt, max_gap),
            )? {
                groups.push(g);
            }
        }
    }

    let pss = session.samples(Modality::PedalFsr);
    if !pss.is_empty() {
        let assoc = associate(&server_times(pss), times)?;
        let mut channels: Vec<u8> = pss
            .iter()
            .flat_map(|s| match &s.payload {
                Payload::Pss(r) => r.iter().map(|r| r.channel).collect(),
                _ => Vec::new(),
            })
            .collect();
        channels.sort_unstable();
        channels.dedup();
        for ch in channels {
            let th = opts
                .pedal_thresholds
                .get(&ch)
                .copied()
                .unwrap_or(opts.default_threshold_v);
            let rows = assoc
                .iter()
                .map(|a| {
                    let Payload::Pss(r) = &pss[(*a)?].payload else {
                        return None;
                    };
                    r.iter()
                        .find(|r| r.channel == ch)
                        .map(|r| vec![r.voltage, f64::from(u8::from(r.voltage >= th))])
                })
                .collect();
            if let Some(g) = group_from_rows(format!("pss{ch}"), &PSS_FIELDS, rows, hold_fill)? {
                groups.push(g);
            }
        }
    }

    let labels = expand_labels(&opts.labels, &vt)?;
    let trial = AlignedTrial {
        name: session.name(),
        rate_hz: rate,
        frame_times: tb.times,
        frame_index: tb.frame_index,
        groups,
        labels,
    };
    trial.validate()?;
    Ok(trial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub group: Option<String>,
    pub unit: String,
}

/// Sidecar describing an exported trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSchema {
    pub trial: String,
    pub rate_hz: f64,
    pub rows: usize,
    pub background_label: String,
    pub groups: Vec<(String, Vec<String>)>,
    pub columns: Vec<ColumnSchema>,
}

fn unit_of(field: &str) -> &'static str {
    if field.ends_with("_cm") {
        "cm"
    } else if field.ends_with("_deg") {
        "deg"
    } else if field.ends_with("_v") {
        "V"
    } else {
        "1"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::invalid(format!("unknown export format `{other}`"))),
        }
    }
}

pub fn schema_of(trial: &AlignedTrial) -> TrialSchema {
    let mut columns = vec![
        ColumnSchema {
            name: "frame_time_ns".into(),
            group: None,
            unit: "ns".into(),
        },
        ColumnSchema {
            name: "frame_index".into(),
            group: None,
            unit: "1".into(),
        },
    ];
    for g in &trial.groups {
        for f in &g.fields {
            columns.push(ColumnSchema {
                name: format!("{}_{}", g.name, f),
                group: Some(g.name.clone()),
                unit: unit_of(f).into(),
            });
        }
        columns.push(ColumnSchema {
            name: format!("{}_missing", g.name),
            group: Some(g.name.clone()),
            unit: "1".into(),
        });
    }
    columns.push(ColumnSchema {
        name: "label".into(),
        group: None,
        unit: "label".into(),
    });
    TrialSchema {
        trial: trial.name.clone(),
        rate_hz: trial.rate_hz,
        rows: trial.len(),
        background_label: BACKGROUND_LABEL.into(),
        groups: trial
            .groups
            .iter()
            .map(|g| (g.name.clone(), g.fields.clone()))
            .collect(),
        columns,
    }
}

/// CSV text of a trial table.
pub fn trial_csv(trial: &AlignedTrial) -> String {
    let schema = schema_of(trial);
    let mut s = schema
        .columns
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for k in 0..trial.len() {
        let _ = write!(
            s,
            "{},{}",
            trial.frame_times[k].as_nanos(),
            trial.frame_index[k]
        );
        for g in &trial.groups {
            for v in &g.values {
                let _ = write!(s, ",{}", v[k]);
            }
            let _ = write!(s, ",{}", u8::from(g.missing[k]));
        }
        let _ = writeln!(s, ",{}", trial.labels[k]);
    }
    s
}

/// Writes `<dir>/<trial>.csv` and `<dir>/<trial>.schema.json`.
pub fn export_dataset(
    trial: &AlignedTrial,
    dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>> {
    let ExportFormat::Csv = format;
    if trial.is_empty() {
        return Err(Error::invalid(format!(
            "trial {} has no frames to export",
            trial.name
        )));
    }
    trial.validate()?;
    create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", trial.name));
    let schema_path = dir.join(format!("{}.schema.json", trial.name));
    write_atomic(&csv_path, trial_csv(trial).as_bytes())?;
    write_json(&schema_path, &schema_of(trial))?;
    Ok(vec![csv_path, schema_path])
}

/// Reads a trial exported by [`export_dataset`].
pub fn read_aligned(csv_path: &Path) -> Result<AlignedTrial> {
    let schema_path = csv_path.with_extension("schema.json");
    let schema: TrialSchema = read_json(&schema_path)?;
    let text = read_to_string(csv_path)?;
    let malformed = |m: String| Error::Malformed {
        path: csv_path.to_path_buf(),
        message: m,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<String> = schema.columns.iter().map(|c| c.name.clone()).collect();
    if header != expected {
        return Err(malformed("header does not match the schema sidecar".into()));
    }
    let mut groups: Vec<ColumnGroup> = schema
        .groups
        .iter()
        .map(|(name, fields)| ColumnGroup {
            name: name.clone(),
            fields: fields.clone(),
            values: vec![Vec::new(); fields.len()],
            missing: Vec::new(),
        })
        .collect();
    let (mut frame_times, mut frame_index, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed(format!("row {}: bad value in column {i}", line + 2)))
        };
        let ts: i64 = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(format!("row {}: bad frame time", line + 2)))?;
        frame_times.push(Timestamp::from_nanos(ts)?);
        frame_index.push(num(1)? as u64);
        let mut c = 2;
        for g in &mut groups {
            for v in &mut g.values {
                v.push(num(c)?);
                c += 1;
            }
            g.missing.push(num(c)? != 0.0);
            c += 1;
        }
        labels.push(rec.get(c).unwrap_or_default().to_string());
    }
    let trial = AlignedTrial {
        name: schema.trial,
        rate_hz: schema.rate_hz,
        frame_times,
        frame_index,
        groups,
        labels,
    };
    trial.validate()?;
    Ok(trial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(ns: i64) -> Timestamp {
        Timestamp::from_nanos(ns).unwrap()
    }

    fn frames(n: usize, rate: f64) -> Vec<Timestamp> {
        (0..n as u64).map(|k| ts(tick_nanos(k, rate))).collect()
    }

    fn video(times: &[i64]) -> Vec<StampedSample> {
        times
            .iter()
            .enumerate()
            .map(|(k, &t)| StampedSample {
                stream_id: "video".into(),
                source_ts: None,
                server_ts: ts(t),
                payload: Payload::Video {
                    frame_index: k as u64,
                },
            })
            .collect()
    }

    #[test]
    fn timebase() {
        let t: Vec<i64> = (0..60).map(|k| tick_nanos(k, 30.0)).collect();
        let tb = build_timebase(&video(&t)).unwrap();
        assert_eq!(tb.times.len(), 60);
        assert_eq!(tb.times[1].as_nanos(), 33_333_333);
        let tb = build_timebase(&video(&[0, 10, 10, 20])).unwrap();
        assert_eq!(tb.times.len(), 3);
        assert!(build_timebase(&video(&[5])).is_err());
        assert!(build_timebase(&[]).is_err());
    }

    #[test]
    fn association() {
        let f = [ts(100), ts(200), ts(300)];
        assert_eq!(
            associate(&[ts(150), ts(200)], &f).unwrap(),
            vec![None, Some(1), Some(1)]
        );
        assert!(associate(&[ts(2), ts(1)], &f).is_err());
    }

    #[test]
    fn fill_examples() {
        let t = frames(90, 30.0);
        let cubic = |x: f64| 1.0 + 2.0 * x - 3.0 * x * x + 0.7 * x * x * x;
        let truth: Vec<f64> = t.iter().map(|t| cubic(t.as_secs_f64())).collect();
        let mut missing = vec![false; 90];
        missing[30..44].iter_mut().for_each(|m| *m = true);
        let filled = fill_gaps(&truth, &missing, &t, DEFAULT_MAX_SPLINE_GAP_NS).unwrap();
        for i in 0..90 {
            assert!((filled[i] - truth[i]).abs() < 1e-9);
        }
        let mut missing = vec![false; 90];
        missing[20..81].iter_mut().for_each(|m| *m = true);
        let filled = fill_gaps(&truth, &missing, &t, DEFAULT_MAX_SPLINE_GAP_NS).unwrap();
        assert!(filled[20..81].iter().all(|&v| v == truth[19]));
        assert_eq!(fill_gaps(&truth, &[false; 90], &t, 1).unwrap(), truth);
        assert!(fill_gaps(&truth, &[true; 90], &t, 1).is_err());
    }

    #[test]
    fn leading_and_trailing() {
        let t = frames(6, 30.0);
        let v = [0.0, 0.0, 3.0, 4.0, 0.0, 0.0];
        let m = [true, true, false, false, true, true];
        assert_eq!(
            fill_gaps(&v, &m, &t, DEFAULT_MAX_SPLINE_GAP_NS).unwrap(),
            vec![3.0, 3.0, 3.0, 4.0, 4.0, 4.0]
        );
    }

    fn trial(n: usize) -> AlignedTrial {
        AlignedTrial {
            name: "t".into(),
            rate_hz: 30.0,
            frame_times: frames(n, 30.0),
            frame_index: (0..n as u64).collect(),
            groups: vec![ColumnGroup {
                name: "pss5".into(),
                fields: PSS_FIELDS.iter().map(|s| s.to_string()).collect(),
                values: vec![vec![0.1; n], vec![0.0; n]],
                missing: vec![false; n],
            }],
            labels: vec![BACKGROUND_LABEL.into(); n],
        }
    }

    #[test]
    fn resample_examples() {
        let t = trial(90);
        let r = resample(&t, 10.0).unwrap();
        assert_eq!(r.len(), 30);
        assert_eq!(&r.frame_index[..3], &[0, 3, 6]);
        assert_eq!(resample(&t, 30.0).unwrap(), t);
        assert!(resample(&t, 12.0).is_err());
    }

    #[test]
    fn labels() {
        let t = frames(90, 30.0);
        let seg = GestureSegment::new("G1", ts(1_000_000_000), ts(2_000_000_000)).unwrap();
        let l = expand_labels(&[seg], &t).unwrap();
        assert_eq!(l.iter().filter(|s| *s == "G1").count(), 30);
        assert!(expand_labels(&[], &t)
            .unwrap()
            .iter()
            .all(|s| s == BACKGROUND_LABEL));
        let a = GestureSegment::new("G1", ts(0), ts(10)).unwrap();
        let b = GestureSegment::new("G2", ts(5), ts(20)).unwrap();
        let err = expand_labels(&[a, b], &t).unwrap_err().to_string();
        assert!(err.contains("G1") && err.contains("G2"));
    }

    #[test]
    fn clutch_masking() {
        let mut t = trial(30);
        assert_eq!(mask_clutch(&t, 5).unwrap().len(), 30);
        t.groups[0].values[1][10..20]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        let m = mask_clutch(&t, 5).unwrap();
        assert_eq!(m.len(), 20);
        assert!(m.group("clutch").is_some());
        t.groups[0].values[1].iter_mut().for_each(|v| *v = 1.0);
        assert!(mask_clutch(&t, 5).unwrap().is_empty());
        assert!(mask_clutch(&t, 3).is_err());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trial(12);
        t.labels[3] = "G4".into();
        let files = export_dataset(&t, dir.path(), ExportFormat::Csv).unwrap();
        let first = std::fs::read(&files[0]).unwrap();
        export_dataset(&t, dir.path(), ExportFormat::Csv).unwrap();
        assert_eq!(std::fs::read(&files[0]).unwrap(), first);
        assert_eq!(read_aligned(&files[0]).unwrap(), t);
        assert!(export_dataset(&trial(0), dir.path(), ExportFormat::Csv).is_err());
        assert!("parquet".parse::<ExportFormat>().is_err());
    }
}
