//! Shared domain types.
//!
//! Units are fixed at the type boundary: positions in centimeters, angles in
//! degrees, voltages in volts, time in integer nanoseconds since the Unix
//! epoch. Keypoint payloads are the one exception on the wire (meters, as the
//! depth camera reports them) and are converted when read.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tracker working-volume guard in centimeters.
pub const MAX_POSITION_CM: f64 = 100.0;

/// Highest pedal-sensing channel number.
pub const MAX_PEDAL_CHANNEL: u8 = 9;

/// Name used in pedal mappings for the clutch pedal.
pub const CLUTCH_PEDAL: &str = "Clutch";

pub const NANOS_PER_SECOND: i64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Timestamp(i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_nanos(ns: i64) -> Result<Self> {
        if ns < 0 {
            return Err(Error::invalid(format!("negative timestamp {ns}")));
        }
        Ok(Timestamp(ns))
    }

    pub fn from_secs_f64(secs: f64) -> Result<Self> {
        if !secs.is_finite() {
            return Err(Error::invalid("non-finite timestamp"));
        }
        Self::from_nanos((secs * NANOS_PER_SECOND as f64).round() as i64)
    }

    pub fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SECOND as f64
    }

    /// Signed difference `self - earlier` in nanoseconds.
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn saturating_sub_nanos(self, ns: i64) -> Timestamp {
        Timestamp((self.0 - ns).max(0))
    }

    pub fn add_nanos(self, ns: i64) -> Timestamp {
        Timestamp((self.0 + ns).max(0))
    }
}

impl TryFrom<i64> for Timestamp {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        Timestamp::from_nanos(v)
    }
}

impl From<Timestamp> for i64 {
    fn from(t: Timestamp) -> i64 {
        t.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Tick time of sample `index` for a stream running at `rate_hz`, relative to stream start.
pub fn tick_nanos(index: u64, rate_hz: f64) -> i64 {
    (index as f64 * NANOS_PER_SECOND as f64 / rate_hz).round() as i64
}

/// Coordinate frames that transforms move between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameId {
    /// Electromagnetic tracker.
    #[serde(rename = "T")]
    Tracker,
    /// Master tool manipulator base.
    #[serde(rename = "M")]
    Mtm,
    /// Patient side manipulator base.
    #[serde(rename = "P")]
    Psm,
    /// Depth camera.
    #[serde(rename = "C")]
    Camera,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrameId::Tracker => "T",
            FrameId::Mtm => "M",
            FrameId::Psm => "P",
            FrameId::Camera => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for FrameId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "tracker" => Ok(FrameId::Tracker),
            "M" | "m" | "mtm" => Ok(FrameId::Mtm),
            "P" | "p" | "psm" => Ok(FrameId::Psm),
            "C" | "c" | "camera" => Ok(FrameId::Camera),
            other => Err(Error::invalid(format!("unknown frame `{other}`"))),
        }
    }
}

/// Position (cm) plus azimuth/elevation/roll orientation (degrees) of one sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose")]
pub struct Pose6Dof {
    pub position: [f64; 3],
    /// (azimuth, elevation, roll)
    pub orientation: [f64; 3],
}

#[derive(Deserialize)]
struct RawPose {
    position: [f64; 3],
    orientation: [f64; 3],
}

impl TryFrom<RawPose> for Pose6Dof {
    type Error = Error;
    fn try_from(raw: RawPose) -> Result<Self> {
        Pose6Dof::new(raw.position, raw.orientation)
    }
}

impl Pose6Dof {
    pub fn new(position: [f64; 3], orientation: [f64; 3]) -> Result<Self> {
        for (axis, &v) in position.iter().enumerate() {
            if !v.is_finite() || v.abs() > MAX_POSITION_CM {
                return Err(Error::invalid(format!(
                    "position component {axis} = {v} cm outside ±{MAX_POSITION_CM} cm"
                )));
            }
        }
        let [az, el, roll] = orientation;
        let in_range = |v: f64, lim: f64| v.is_finite() && (-lim..=lim).contains(&v);
        if !in_range(az, 180.0) || !in_range(el, 90.0) || !in_range(roll, 180.0) {
            return Err(Error::invalid(format!(
                "orientation ({az}, {el}, {roll}) deg outside azimuth/roll ±180, elevation ±90"
            )));
        }
        Ok(Pose6Dof {
            position,
            orientation,
        })
    }

    pub fn origin() -> Self {
        Pose6Dof {
            position: [0.0; 3],
            orientation: [0.0; 3],
        }
    }

    pub fn position_vector(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        angles_to_matrix(self.orientation)
    }
}

/// Intrinsic Z-Y-X rotation: `Rz(azimuth) * Ry(elevation) * Rx(roll)`.
///
/// This is the only place orientation triples become matrices; the inverse is
/// [`matrix_to_angles`].
pub fn angles_to_matrix(orientation_deg: [f64; 3]) -> Matrix3<f64> {
    let [a, e, r] = orientation_deg.map(f64::to_radians);
    let (sa, ca) = a.sin_cos();
    let (se, ce) = e.sin_cos();
    let (sr, cr) = r.sin_cos();
    Matrix3::new(
        ca * ce,
        ca * se * sr - sa * cr,
        ca * se * cr + sa * sr,
        sa * ce,
        sa * se * sr + ca * cr,
        sa * se * cr - ca * sr,
        -se,
        ce * sr,
        ce * cr,
    )
}

/// Inverse of [`angles_to_matrix`]; elevation lands in [-90, 90].
pub fn matrix_to_angles(m: &Matrix3<f64>) -> [f64; 3] {
    let elevation = (-m[(2, 0)]).atan2((m[(0, 0)].powi(2) + m[(1, 0)].powi(2)).sqrt());
    let (azimuth, roll) = if elevation.cos().abs() < 1e-12 {
        // Gimbal lock: fold everything into azimuth.
        ((-m[(0, 1)]).atan2(m[(1, 1)]), 0.0)
    } else {
        (m[(1, 0)].atan2(m[(0, 0)]), m[(2, 1)].atan2(m[(2, 2)]))
    };
    [azimuth, elevation, roll].map(f64::to_degrees)
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(v: f64) -> f64 {
    let mut w = (v + 180.0).rem_euclid(360.0) - 180.0;
    if w <= -180.0 {
        w += 360.0;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    EmTracker,
    HandKeypoints,
    PedalFsr,
    VideoClock,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::EmTracker,
        Modality::HandKeypoints,
        Modality::PedalFsr,
        Modality::VideoClock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::EmTracker => "EmTracker",
            Modality::HandKeypoints => "HandKeypoints",
            Modality::PedalFsr => "PedalFsr",
            Modality::VideoClock => "VideoClock",
        }
    }

    /// File name of the per-session recording for this modality.
    pub fn file_name(self) -> &'static str {
        match self {
            Modality::EmTracker => "em.csv",
            Modality::HandKeypoints => "keypoints.csv",
            Modality::PedalFsr => "pss.csv",
            Modality::VideoClock => "video.csv",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownModality(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub stream_id: String,
    pub modality: Modality,
    pub nominal_rate_hz: f64,
    pub channel_count: u32,
}

impl StreamSpec {
    pub fn new(
        stream_id: impl Into<String>,
        modality: Modality,
        nominal_rate_hz: f64,
        channel_count: u32,
    ) -> Self {
        StreamSpec {
            stream_id: stream_id.into(),
            modality,
            nominal_rate_hz,
            channel_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stream_id.is_empty() {
            return Err(Error::invalid("empty stream id"));
        }
        if !(self.nominal_rate_hz.is_finite() && self.nominal_rate_hz > 0.0) {
            return Err(Error::invalid(format!(
                "stream `{}` nominal rate must be > 0",
                self.stream_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

impl FromStr for Hand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Hand::Left),
            "right" => Ok(Hand::Right),
            other => Err(Error::invalid(format!("unknown hand `{other}`"))),
        }
    }
}

/// Tracker sensor indices: 1 left middle finger, 2 left thumb, 3 right thumb, 4 right middle finger.
pub const EM_SENSOR_IDS: [u8; 4] = [1, 2, 3, 4];

/// The two tracker sensors mounted on one hand's grip, as (middle finger, thumb).
pub fn em_sensors_for(hand: Hand) -> (u8, u8) {
    match hand {
        Hand::Left => (1, 2),
        Hand::Right => (4, 3),
    }
}

/// Hand-landmark ids used for the grip estimate (thumb tip, index tip).
pub const KEYPOINT_THUMB_TIP: u8 = 4;
pub const KEYPOINT_INDEX_TIP: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub sensor_id: u8,
    pub pose: Pose6Dof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub hand: Hand,
    pub keypoint_id: u8,
    /// Camera-frame position in meters.
    pub position_m: [f64; 3],
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalReading {
    pub channel: u8,
    pub voltage: f64,
    /// 1 = pressed, 0 = not pressed.
    pub state: u8,
}

impl PedalReading {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_PEDAL_CHANNEL).contains(&self.channel) {
            return Err(Error::invalid(format!(
                "pedal channel {} outside 1..={MAX_PEDAL_CHANNEL}",
                self.channel
            )));
        }
        if !(self.voltage.is_finite() && self.voltage >= 0.0) {
            return Err(Error::invalid(format!("pedal voltage {}", self.voltage)));
        }
        if self.state > 1 {
            return Err(Error::invalid(format!("pedal state {}", self.state)));
        }
        Ok(())
    }
}

/// Modality-specific sample body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Em(Vec<SensorPose>),
    Keypoints(Vec<Keypoint>),
    Pss(Vec<PedalReading>),
    Video { frame_index: u64 },
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Payload::Em(_) => Modality::EmTracker,
            Payload::Keypoints(_) => Modality::HandKeypoints,
            Payload::Pss(_) => Modality::PedalFsr,
            Payload::Video { .. } => Modality::VideoClock,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Payload::Pss(readings) => readings.iter().try_for_each(PedalReading::validate),
            Payload::Keypoints(kps) => {
                if kps.iter().flat_map(|k| k.position_m).all(f64::is_finite) {
                    Ok(())
                } else {
                    Err(Error::invalid("non-finite keypoint"))
                }
            }
            Payload::Em(_) | Payload::Video { .. } => Ok(()),
        }
    }
}

/// One reading on one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedSample {
    pub stream_id: String,
    pub source_ts: Option<Timestamp>,
    pub server_ts: Timestamp,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PedalMapping {
    pub channel: u8,
    pub pedal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub subject: String,
    pub task: String,
    pub trial: u32,
    pub master_frequency_hz: f64,
    pub pedal_mapping: Vec<PedalMapping>,
}

impl SessionMeta {
    pub fn validate(&self) -> Result<()> {
        if self.subject.is_empty() || self.task.is_empty() {
            return Err(Error::invalid("subject and task are required"));
        }
        if self.trial < 1 {
            return Err(Error::invalid("trial must be >= 1"));
        }
        if !(self.master_frequency_hz.is_finite() && self.master_frequency_hz > 0.0) {
            return Err(Error::invalid("master frequency must be > 0"));
        }
        let mut seen = [false; MAX_PEDAL_CHANNEL as usize + 1];
        for m in &self.pedal_mapping {
            if !(1..=MAX_PEDAL_CHANNEL).contains(&m.channel) {
                return Err(Error::invalid(format!(
                    "pedal mapping channel {} outside 1..={MAX_PEDAL_CHANNEL}",
                    m.channel
                )));
            }
            if std::mem::replace(&mut seen[m.channel as usize], true) {
                return Err(Error::invalid(format!(
                    "pedal channel {} mapped twice",
                    m.channel
                )));
            }
        }
        Ok(())
    }

    /// Directory-safe session name, `<subject>_<task>_T<trial>`.
    pub fn session_name(&self) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        c
                    } else {
                        '-'
                    }
                })
                .collect()
        };
        format!(
            "{}_{}_T{:02}",
            clean(&self.subject),
            clean(&self.task),
            self.trial
        )
    }

    pub fn pedal_name(&self, channel: u8) -> Option<&str> {
        self.pedal_mapping
            .iter()
            .find(|m| m.channel == channel)
            .map(|m| m.pedal.as_str())
    }

    pub fn clutch_channel(&self) -> Option<u8> {
        self.pedal_mapping
            .iter()
            .find(|m| m.pedal == CLUTCH_PEDAL)
            .map(|m| m.channel)
    }
}

/// Console-pedal to sensing-channel mapping used on the da Vinci Xi.
pub fn da_vinci_pedal_mapping() -> Vec<PedalMapping> {
    [
        (1, "Secondary Energy (Left)"),
        (2, "Secondary Energy (Right)"),
        (3, "Primary Energy (Left)"),
        (4, "Primary Energy (Right)"),
        (5, CLUTCH_PEDAL),
        (6, "Camera"),
        (7, "Arm Swap"),
    ]
    .into_iter()
    .map(|(channel, pedal)| PedalMapping {
        channel,
        pedal: pedal.to_string(),
    })
    .collect()
}

/// Whether a mapped pedal name is an energy pedal.
pub fn is_energy_pedal(name: &str) -> bool {
    name.contains("Energy")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureSegment {
    pub label: String,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl GestureSegment {
    pub fn new(label: impl Into<String>, start: Timestamp, end: Timestamp) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!(
                "segment start {start} >= end {end}"
            )));
        }
        Ok(GestureSegment {
            label: label.into(),
            start,
            end,
        })
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}
