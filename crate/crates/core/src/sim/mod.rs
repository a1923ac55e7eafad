//! Seeded ground-truth teleoperation scenarios and the sensor streams derived from them.

mod config;
mod scenario;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

pub use config::{
    ClutchConfig, ControllerConfig, EmConfig, FsrChannelModel, GrasperConfig, KeypointConfig,
    MotionConfig, PressSpec, PssConfig, RigConfig, ScenarioConfig, TransformSpec, VideoConfig,
};
pub use scenario::{
    generate_scenario, min_jerk, GroundTruthScenario, HandTruth, Interval, Keyframe,
};

use crate::error::{Error, Result};
use crate::model::{
    em_sensors_for, matrix_to_angles, tick_nanos, Hand, Keypoint, Modality, Payload, PedalReading,
    Pose6Dof, SensorPose, KEYPOINT_INDEX_TIP, KEYPOINT_THUMB_TIP, NANOS_PER_SECOND,
};

const SALT_EM: u64 = 2;
const SALT_KEYPOINTS: u64 = 3;
const SALT_PSS: u64 = 4;
const SALT_VIDEO: u64 = 5;

pub const EM_STREAM_ID: &str = "em";
pub const KEYPOINT_STREAM_ID: &str = "keypoints";
pub const PSS_STREAM_ID: &str = "pss";
pub const VIDEO_STREAM_ID: &str = "video";

pub fn stream_id_for(modality: Modality) -> &'static str {
    match modality {
        Modality::EmTracker => EM_STREAM_ID,
        Modality::HandKeypoints => KEYPOINT_STREAM_ID,
        Modality::PedalFsr => PSS_STREAM_ID,
        Modality::VideoClock => VIDEO_STREAM_ID,
    }
}

pub(crate) fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One generated reading before it reaches the server.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub modality: Modality,
    /// Acquisition time on scenario time.
    pub acquired_ns: i64,
    /// Transmission delay between acquisition and arrival at the server.
    pub latency_ns: i64,
    /// Whether the client reports a source timestamp.
    pub has_source_ts: bool,
    pub payload: Payload,
}

impl SimSample {
    pub fn send_ns(&self) -> i64 {
        self.acquired_ns + self.latency_ns
    }
}

fn ms_to_ns(ms: f64) -> i64 {
    (ms * 1e6).round() as i64
}

/// Tick times `< duration_ns` for a stream at `rate_hz`.
pub fn tick_times(rate_hz: f64, duration_ns: i64) -> Vec<i64> {
    (0u64..)
        .map(|k| tick_nanos(k, rate_hz))
        .take_while(|&t| t < duration_ns)
        .collect()
}

fn normal(sd: f64) -> Option<Normal<f64>> {
    (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite sd"))
}

fn jitter3(rng: &mut ChaCha8Rng, n: &Option<Normal<f64>>) -> Vector3<f64> {
    match n {
        Some(n) => Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
        None => Vector3::zeros(),
    }
}

/// Divider output `R·V_CC / (R + R_FSR)` for the pressed state, plus clamped Gaussian noise.
pub fn fsr_voltage(model: &FsrChannelModel, pressed: bool, rng: &mut impl Rng) -> f64 {
    let r_fsr = if pressed {
        model.r_fsr_pressed_ohm
    } else {
        model.r_fsr_released_ohm
    };
    let v = model.r_series_ohm * model.vcc / (model.r_series_ohm + r_fsr);
    let noise = match normal(model.noise_sd_v) {
        Some(n) => n.sample(rng),
        None => 0.0,
    };
    (v + noise).clamp(0.0, model.vcc)
}

/// Quadratic position-dependent bias in the tracker frame, zero at `centre`.
pub fn distortion_bias(k: f64, p: &Vector3<f64>, centre: &Vector3<f64>) -> Vector3<f64> {
    if k == 0.0 {
        return Vector3::zeros();
    }
    let d = p - centre;
    k * Vector3::new(
        d.x * d.y + 0.5 * d.z * d.z,
        d.y * d.z + 0.5 * d.x * d.x,
        d.z * d.x + 0.5 * d.y * d.y,
    )
}

/// Tracker-frame point the distortion field is centred on: the middle of the two home positions.
pub fn distortion_centre(s: &GroundTruthScenario) -> Vector3<f64> {
    let mid = 0.5 * (Vector3::from(s.left.home_cm) + Vector3::from(s.right.home_cm));
    s.tracker_to_mtm.inverse().apply_point(&mid)
}

/// Four finger-mounted sensor poses per tick in the tracker frame.
pub fn em_stream(s: &GroundTruthScenario, cfg: &EmConfig) -> Vec<SimSample> {
    let mut rng = rng_for(s.seed, SALT_EM);
    let pos_noise = normal(cfg.noise_sd_cm);
    let ang_noise = normal(cfg.angle_noise_sd_deg);
    let to_tracker = s.tracker_to_mtm.inverse();
    let centre = distortion_centre(s);
    let latency = ms_to_ns(cfg.latency_ms);
    tick_times(cfg.rate_hz, s.duration_ns)
        .into_iter()
        .map(|t| {
            let mut poses = Vec::with_capacity(4);
            for hand in Hand::BOTH {
                let (_, r) = s.mtm_pose(hand, t);
                let (middle, thumb) = s.finger_positions(hand, t);
                let (middle_id, thumb_id) = em_sensors_for(hand);
                for (id, p) in [(middle_id, middle), (thumb_id, thumb)] {
                    let pt = to_tracker.apply_point(&p);
                    let pt = pt
                        + distortion_bias(cfg.distortion_per_cm, &pt, &centre)
                        + jitter3(&mut rng, &pos_noise);
                    let mut angles = matrix_to_angles(&to_tracker.apply_rotation(&r));
                    if ang_noise.is_some() {
                        let j = jitter3(&mut rng, &ang_noise);
                        angles = [
                            crate::model::wrap_degrees(angles[0] + j.x),
                            (angles[1] + j.y).clamp(-90.0, 90.0),
                            crate::model::wrap_degrees(angles[2] + j.z),
                        ];
                    }
                    let pose = Pose6Dof::new(pt.into(), angles).expect("sensor pose in range");
                    poses.push(SensorPose {
                        sensor_id: id,
                        pose,
                    });
                }
            }
            poses.sort_by_key(|p| p.sensor_id);
            SimSample {
                modality: Modality::EmTracker,
                acquired_ns: t,
                latency_ns: latency,
                has_source_ts: true,
                payload: Payload::Em(poses),
            }
        })
        .collect()
}

/// Places exactly `round(fraction·n)` missing samples as contiguous gaps
/// with roughly exponential lengths of mean `mean_gap` samples.
pub fn dropout_mask(n: usize, fraction: f64, mean_gap: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let missing = ((fraction * n as f64).round() as usize).min(n);
    let mut mask = vec![false; n];
    if missing == 0 {
        return mask;
    }
    let exp = Exp::new(1.0 / mean_gap.max(1.0)).expect("positive mean");
    let mut gaps = Vec::new();
    let mut total = 0;
    while total < missing {
        let len = (exp.sample(rng).round() as usize).clamp(1, missing - total);
        gaps.push(len);
        total += len;
    }
    // Interior runs of valid samples need at least one sample each.
    let valid = n - missing;
    while gaps.len() > 1 && gaps.len() - 1 > valid {
        let last = gaps.pop().unwrap_or(0);
        gaps[0] += last;
    }
    let k = gaps.len();
    let free = valid - (k - 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut pos = 0;
    let mut prev = 0;
    for (i, (&cut, &len)) in cuts.iter().zip(&gaps).enumerate() {
        pos += cut - prev + usize::from(i > 0);
        prev = cut;
        mask[pos..pos + len].iter_mut().for_each(|m| *m = true);
        pos += len;
    }
    mask
}

/// Thumb and index fingertip keypoints per hand in the camera frame (meters).
pub fn keypoint_stream(s: &GroundTruthScenario, cfg: &KeypointConfig) -> Result<Vec<SimSample>> {
    if !(0.0..1.0).contains(&cfg.dropout_fraction) {
        return Err(Error::invalid(format!(
            "dropout fraction {} outside [0, 1)",
            cfg.dropout_fraction
        )));
    }
    let mut rng = rng_for(s.seed, SALT_KEYPOINTS);
    let ticks = tick_times(cfg.rate_hz, s.duration_ns);
    let mean_gap = cfg.mean_gap_s * cfg.rate_hz;
    let masks: Vec<Vec<bool>> = Hand::BOTH
        .iter()
        .map(|_| dropout_mask(ticks.len(), cfg.dropout_fraction, mean_gap, &mut rng))
        .collect();
    let noise = normal(cfg.noise_sd_cm);
    let to_camera = s.camera_to_mtm.inverse();
    let latency = ms_to_ns(cfg.latency_ms);
    Ok(ticks
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut kps = Vec::with_capacity(4);
            for (h, hand) in Hand::BOTH.into_iter().enumerate() {
                let (index, thumb) = s.finger_positions(hand, t);
                let valid = !masks[h][i];
                for (id, p) in [(KEYPOINT_THUMB_TIP, thumb), (KEYPOINT_INDEX_TIP, index)] {
                    let position_m = if valid {
                        let pc = to_camera.apply_point(&p) + jitter3(&mut rng, &noise);
                        (pc / 100.0).into()
                    } else {
                        [0.0; 3]
                    };
                    kps.push(Keypoint {
                        hand,
                        keypoint_id: id,
                        position_m,
                        valid,
                    });
                }
            }
            SimSample {
                modality: Modality::HandKeypoints,
                acquired_ns: t,
                latency_ns: latency,
                has_source_ts: true,
                payload: Payload::Keypoints(kps),
            }
        })
        .collect())
}

/// One voltage per configured channel per tick; `state` is left 0 for downstream binarization.
pub fn pss_stream(s: &GroundTruthScenario, cfg: &PssConfig) -> Vec<SimSample> {
    let mut rng = rng_for(s.seed, SALT_PSS);
    let mut channels = cfg.channels.clone();
    channels.sort_unstable();
    channels.dedup();
    let latency = ms_to_ns(cfg.latency_ms);
    tick_times(cfg.rate_hz, s.duration_ns)
        .into_iter()
        .map(|t| {
            let readings = channels
                .iter()
                .map(|&channel| PedalReading {
                    channel,
                    voltage: fsr_voltage(&cfg.model, s.pedal_pressed(channel, t), &mut rng),
                    state: 0,
                })
                .collect();
            SimSample {
                modality: Modality::PedalFsr,
                acquired_ns: t,
                latency_ns: latency,
                has_source_ts: true,
                payload: Payload::Pss(readings),
            }
        })
        .collect()
}

/// Frame clock: indices 0, 1, … with optional Gaussian delivery jitter and no source timestamp.
pub fn video_clock_stream(
    rate_hz: f64,
    duration_s: f64,
    jitter_ms: f64,
    seed: u64,
) -> Vec<SimSample> {
    if !(duration_s > 0.0) {
        return Vec::new();
    }
    let mut rng = rng_for(seed, SALT_VIDEO);
    let jitter = normal(ms_to_ns(jitter_ms) as f64);
    let duration_ns = (duration_s * NANOS_PER_SECOND as f64).round() as i64;
    let mut last = i64::MIN;
    tick_times(rate_hz, duration_ns)
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let j = jitter
                .as_ref()
                .map_or(0, |n| n.sample(&mut rng).round() as i64);
            let at = (t + j).max(0).max(last.saturating_add(1));
            last = at;
            SimSample {
                modality: Modality::VideoClock,
                acquired_ns: at,
                latency_ns: 0,
                has_source_ts: false,
                payload: Payload::Video {
                    frame_index: k as u64,
                },
            }
        })
        .collect()
}

/// All four streams of a scenario, using its own config.
pub fn all_streams(s: &GroundTruthScenario) -> Result<Vec<Vec<SimSample>>> {
    let c = &s.config;
    Ok(vec![
        em_stream(s, &c.em),
        keypoint_stream(s, &c.keypoints)?,
        pss_stream(s, &c.pss),
        video_clock_stream(c.video.rate_hz, c.duration_s, c.video.jitter_ms, s.seed),
    ])
}
