use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{da_vinci_pedal_mapping, PedalMapping, MAX_PEDAL_CHANNEL};

/// Contents of `scenario.json`. Every field has a default, so a partial
/// document overrides only what it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    pub video: VideoConfig,
    pub motion: MotionConfig,
    pub grasper: GrasperConfig,
    pub em: EmConfig,
    pub keypoints: KeypointConfig,
    pub pss: PssConfig,
    pub clutch: ClutchConfig,
    pub rig: RigConfig,
    pub controller: ControllerConfig,
    pub pedal_mapping: Vec<PedalMapping>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 30.0,
            video: VideoConfig::default(),
            motion: MotionConfig::default(),
            grasper: GrasperConfig::default(),
            em: EmConfig::default(),
            keypoints: KeypointConfig::default(),
            pss: PssConfig::default(),
            clutch: ClutchConfig::default(),
            rig: RigConfig::default(),
            controller: ControllerConfig::default(),
            pedal_mapping: da_vinci_pedal_mapping(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub rate_hz: f64,
    /// Standard deviation of frame delivery jitter.
    pub jitter_ms: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            rate_hz: 30.0,
            jitter_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Half-range of waypoint displacement from each hand's home position.
    pub amplitude_cm: f64,
    pub orientation_amplitude_deg: f64,
    pub segment_min_s: f64,
    pub segment_max_s: f64,
    /// Rest period at the start of the trial before the first movement.
    pub initial_rest_s: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            amplitude_cm: 6.0,
            orientation_amplitude_deg: 25.0,
            segment_min_s: 1.0,
            segment_max_s: 2.5,
            initial_rest_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrasperConfig {
    pub open_gap_cm: f64,
    pub closed_gap_cm: f64,
    pub closed_min_s: f64,
    pub closed_max_s: f64,
    pub open_min_s: f64,
    pub open_max_s: f64,
}

impl Default for GrasperConfig {
    fn default() -> Self {
        GrasperConfig {
            open_gap_cm: 6.0,
            closed_gap_cm: 2.0,
            closed_min_s: 2.0,
            closed_max_s: 5.0,
            open_min_s: 1.5,
            open_max_s: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub rate_hz: f64,
    pub noise_sd_cm: f64,
    pub angle_noise_sd_deg: f64,
    pub latency_ms: f64,
    /// Strength of the quadratic position-dependent bias field (1/cm); 0 disables it.
    pub distortion_per_cm: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            rate_hz: 270.0,
            noise_sd_cm: 0.0,
            angle_noise_sd_deg: 0.0,
            latency_ms: 43.3,
            distortion_per_cm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeypointConfig {
    pub rate_hz: f64,
    pub noise_sd_cm: f64,
    /// Fraction of (sample, hand) detections that are missing.
    pub dropout_fraction: f64,
    /// Mean length of one contiguous dropout gap.
    pub mean_gap_s: f64,
    pub latency_ms: f64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        KeypointConfig {
            rate_hz: 30.0,
            noise_sd_cm: 0.0,
            dropout_fraction: 0.0,
            mean_gap_s: 0.4,
            latency_ms: 24.66,
        }
    }
}

/// Voltage-divider model of one force-sensitive resistor channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsrChannelModel {
    pub vcc: f64,
    pub r_series_ohm: f64,
    pub r_fsr_pressed_ohm: f64,
    pub r_fsr_released_ohm: f64,
    pub noise_sd_v: f64,
}

impl Default for FsrChannelModel {
    fn default() -> Self {
        FsrChannelModel {
            vcc: 5.0,
            r_series_ohm: 10_000.0,
            r_fsr_pressed_ohm: 2_500.0,
            r_fsr_released_ohm: 1_000_000.0,
            noise_sd_v: 0.05,
        }
    }
}

impl FsrChannelModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vcc,
            self.r_series_ohm,
            self.r_fsr_pressed_ohm,
            self.r_fsr_released_ohm,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("FSR model values must be > 0"));
        }
        if self.r_fsr_released_ohm <= self.r_fsr_pressed_ohm {
            return Err(Error::invalid(
                "released FSR resistance must exceed pressed resistance",
            ));
        }
        if !(self.noise_sd_v.is_finite() && self.noise_sd_v >= 0.0) {
            return Err(Error::invalid("FSR noise must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressSpec {
    pub channel: u8,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PssConfig {
    pub rate_hz: f64,
    /// Channels read on every tick.
    pub channels: Vec<u8>,
    /// Channels that receive randomly scheduled presses (clutch is scheduled separately).
    pub active_channels: Vec<u8>,
    pub press_min_s: f64,
    pub press_max_s: f64,
    pub mean_idle_s: f64,
    /// Explicit presses; when non-empty they replace the random schedule.
    pub presses: Vec<PressSpec>,
    pub model: FsrChannelModel,
    pub latency_ms: f64,
}

impl Default for PssConfig {
    fn default() -> Self {
        PssConfig {
            rate_hz: 30.0,
            channels: (1..=7).collect(),
            active_channels: vec![2, 4, 6],
            press_min_s: 2.5,
            press_max_s: 6.0,
            mean_idle_s: 6.0,
            presses: Vec::new(),
            model: FsrChannelModel::default(),
            latency_ms: 12.97,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutchConfig {
    /// Pedal channel that carries clutch presses; `None` disables clutching.
    pub channel: Option<u8>,
    pub count: u32,
    pub min_s: f64,
    pub max_s: f64,
}

impl Default for ClutchConfig {
    fn default() -> Self {
        ClutchConfig {
            channel: Some(5),
            count: 1,
            min_s: 0.8,
            max_s: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub orientation_deg: [f64; 3],
    pub translation_cm: [f64; 3],
}

/// Physical placement of the tracker and camera relative to the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub tracker_to_mtm: TransformSpec,
    pub camera_to_mtm: TransformSpec,
    /// Home grip positions of the left and right hands in the MTM frame.
    pub home_left_cm: [f64; 3],
    pub home_right_cm: [f64; 3],
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            tracker_to_mtm: TransformSpec {
                orientation_deg: [35.0, -12.0, 8.0],
                translation_cm: [6.0, -28.0, 12.0],
            },
            camera_to_mtm: TransformSpec {
                orientation_deg: [-90.0, 0.0, 160.0],
                translation_cm: [0.0, 10.0, 45.0],
            },
            home_left_cm: [-12.0, 0.0, 0.0],
            home_right_cm: [12.0, 0.0, 0.0],
        }
    }
}

/// MTM → PSM teleoperation map: motion scaling, a fixed delay and a rigid base offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub scale: f64,
    pub delay_frames: u32,
    pub mtm_to_psm: TransformSpec,
    /// Fixed tool-tip orientation offset applied after the base rotation.
    pub orientation_perturbation_deg: [f64; 3],
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            scale: 0.5,
            delay_frames: 3,
            mtm_to_psm: TransformSpec {
                orientation_deg: [180.0, 0.0, 0.0],
                translation_cm: [0.0, 20.0, -15.0],
            },
            orientation_perturbation_deg: [2.0, -1.5, 3.0],
        }
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0")))
    }
}

fn check_range(name: &str, lo: f64, hi: f64) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name}: need 0 < min <= max")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::invalid("duration must be > 0"));
        }
        check_rate("video rate", self.video.rate_hz)?;
        check_rate("EM rate", self.em.rate_hz)?;
        check_rate("keypoint rate", self.keypoints.rate_hz)?;
        check_rate("pss rate", self.pss.rate_hz)?;
        check_range(
            "motion segment",
            self.motion.segment_min_s,
            self.motion.segment_max_s,
        )?;
        check_range(
            "grasper closed",
            self.grasper.closed_min_s,
            self.grasper.closed_max_s,
        )?;
        check_range(
            "grasper open",
            self.grasper.open_min_s,
            self.grasper.open_max_s,
        )?;
        check_range("press duration", self.pss.press_min_s, self.pss.press_max_s)?;
        check_range("clutch duration", self.clutch.min_s, self.clutch.max_s)?;
        check_rate("mean idle", self.pss.mean_idle_s)?;
        check_rate("mean keypoint gap", self.keypoints.mean_gap_s)?;
        if !(0.0..1.0).contains(&self.keypoints.dropout_fraction) {
            return Err(Error::invalid("dropout fraction must be in [0, 1)"));
        }
        let nonneg = [
            self.motion.amplitude_cm,
            self.motion.orientation_amplitude_deg,
            self.motion.initial_rest_s,
            self.em.noise_sd_cm,
            self.em.angle_noise_sd_deg,
            self.em.latency_ms,
            self.em.distortion_per_cm,
            self.keypoints.noise_sd_cm,
            self.keypoints.latency_ms,
            self.pss.latency_ms,
            self.video.jitter_ms,
            self.grasper.closed_gap_cm,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "noise, latency and amplitude values must be >= 0",
            ));
        }
        if self.grasper.open_gap_cm <= self.grasper.closed_gap_cm {
            return Err(Error::invalid("open finger gap must exceed closed gap"));
        }
        if self.motion.orientation_amplitude_deg > 60.0 {
            return Err(Error::invalid("orientation amplitude above 60 degrees"));
        }
        let channel_ok = |c: &u8| (1..=MAX_PEDAL_CHANNEL).contains(c);
        if !self.pss.channels.iter().all(channel_ok)
            || !self.pss.active_channels.iter().all(channel_ok)
        {
            return Err(Error::invalid("pedal channels must be within 1..=9"));
        }
        for p in &self.pss.presses {
            if !channel_ok(&p.channel) || !(p.start_s >= 0.0 && p.end_s > p.start_s) {
                return Err(Error::invalid(format!("bad press {p:?}")));
            }
        }
        if let Some(c) = self.clutch.channel {
            if !channel_ok(&c) {
                return Err(Error::invalid("clutch channel must be within 1..=9"));
            }
        }
        if !(self.controller.scale.is_finite() && self.controller.scale > 0.0) {
            return Err(Error::invalid("controller scale must be > 0"));
        }
        self.pss.model.validate()
    }

    /// A scenario with no hand motion, grasper changes, presses or clutching.
    pub fn zero_motion(duration_s: f64) -> Self {
        let mut c = ScenarioConfig {
            duration_s,
            ..Default::default()
        };
        c.motion.amplitude_cm = 0.0;
        c.motion.orientation_amplitude_deg = 0.0;
        c.grasper.closed_min_s = 1e6;
        c.grasper.closed_max_s = 1e6;
        c.grasper.open_min_s = 1e6;
        c.grasper.open_max_s = 1e6;
        c.pss.active_channels.clear();
        c.clutch.channel = None;
        c
    }
}
