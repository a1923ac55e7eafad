use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::rng_for;
use crate::calib::rigid::RigidTransform;
use crate::error::Result;
use crate::model::{
    angles_to_matrix, matrix_to_angles, FrameId, GestureSegment, Hand, Pose6Dof, Timestamp,
    NANOS_PER_SECOND,
};

const SALT_MOTION: u64 = 1;

fn secs_to_ns(s: f64) -> i64 {
    (s * NANOS_PER_SECOND as f64).round() as i64
}

/// Half-open interval `[start_ns, end_ns)` on scenario time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start_ns: i64,
    pub end_ns: i64,
}

impl Interval {
    pub fn contains(&self, t_ns: i64) -> bool {
        self.start_ns <= t_ns && t_ns < self.end_ns
    }
}

fn any_contains(intervals: &[Interval], t_ns: i64) -> bool {
    intervals.iter().any(|i| i.contains(t_ns))
}

/// Pose waypoint of one hand: offset from home (cm) and orientation (deg).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t_ns: i64,
    pub offset_cm: [f64; 3],
    pub orientation_deg: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandTruth {
    pub home_cm: [f64; 3],
    pub keyframes: Vec<Keyframe>,
    pub grasper_closed: Vec<Interval>,
}

/// Minimum-jerk blend `10τ³ − 15τ⁴ + 6τ⁵`; zero velocity and acceleration at both ends.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

impl HandTruth {
    /// Offset and orientation triples at `t_ns`, holding the end keyframes outside the schedule.
    fn sample(&self, t_ns: i64) -> ([f64; 3], [f64; 3]) {
        let kf = &self.keyframes;
        let i = kf.partition_point(|k| k.t_ns <= t_ns);
        if i == 0 {
            return (kf[0].offset_cm, kf[0].orientation_deg);
        }
        if i == kf.len() {
            let last = kf[kf.len() - 1];
            return (last.offset_cm, last.orientation_deg);
        }
        let (a, b) = (kf[i - 1], kf[i]);
        let s = min_jerk((t_ns - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64);
        let lerp = |x: [f64; 3], y: [f64; 3]| [0, 1, 2].map(|j| x[j] + s * (y[j] - x[j]));
        (
            lerp(a.offset_cm, b.offset_cm),
            lerp(a.orientation_deg, b.orientation_deg),
        )
    }

    fn position(&self, t_ns: i64) -> Vector3<f64> {
        Vector3::from(self.home_cm) + Vector3::from(self.sample(t_ns).0)
    }
}

/// Seeded ground truth for one trial. All times are nanoseconds from trial start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub duration_ns: i64,
    pub left: HandTruth,
    pub right: HandTruth,
    /// Press intervals per pedal channel (the clutch channel included).
    pub pedal_presses: BTreeMap<u8, Vec<Interval>>,
    pub clutch_intervals: Vec<Interval>,
    pub tracker_to_mtm: RigidTransform,
    pub camera_to_mtm: RigidTransform,
    /// Rigid part of the teleoperation map.
    pub mtm_to_psm: RigidTransform,
    /// `tracker_to_mtm` followed by `mtm_to_psm`.
    pub tracker_to_psm: RigidTransform,
    pub gestures: Vec<GestureSegment>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_hand(cfg: &ScenarioConfig, home: [f64; 3], rng: &mut ChaCha8Rng) -> HandTruth {
    let m = &cfg.motion;
    let duration = secs_to_ns(cfg.duration_s);
    let mut keyframes = vec![Keyframe {
        t_ns: 0,
        offset_cm: [0.0; 3],
        orientation_deg: [0.0; 3],
    }];
    let mut t = secs_to_ns(m.initial_rest_s);
    if t > 0 {
        keyframes.push(Keyframe {
            t_ns: t,
            ..keyframes[0]
        });
    }
    while t < duration {
        t += secs_to_ns(uniform(rng, m.segment_min_s, m.segment_max_s)).max(1);
        let offset_cm = [0; 3].map(|_| uniform(rng, -1.0, 1.0) * m.amplitude_cm);
        let orientation_deg = [0; 3].map(|_| uniform(rng, -1.0, 1.0) * m.orientation_amplitude_deg);
        keyframes.push(Keyframe {
            t_ns: t,
            offset_cm,
            orientation_deg,
        });
    }

    let g = &cfg.grasper;
    let mut grasper_closed = Vec::new();
    let mut t = secs_to_ns(uniform(rng, g.open_min_s, g.open_max_s));
    while t < duration {
        let end = t + secs_to_ns(uniform(rng, g.closed_min_s, g.closed_max_s)).max(1);
        grasper_closed.push(Interval {
            start_ns: t,
            end_ns: end.min(duration),
        });
        t = end + secs_to_ns(uniform(rng, g.open_min_s, g.open_max_s)).max(1);
    }
    HandTruth {
        home_cm: home,
        keyframes,
        grasper_closed,
    }
}

/// Alternating idle/press schedule with exponential idle times.
fn random_presses(
    rng: &mut ChaCha8Rng,
    duration: i64,
    mean_idle_s: f64,
    min_s: f64,
    max_s: f64,
) -> Vec<Interval> {
    let idle = Exp::new(1.0 / mean_idle_s).expect("positive idle mean");
    let mut out = Vec::new();
    let mut t = secs_to_ns(idle.sample(rng));
    while t < duration {
        let end = t + secs_to_ns(uniform(rng, min_s, max_s)).max(1);
        out.push(Interval {
            start_ns: t,
            end_ns: end.min(duration),
        });
        t = end + secs_to_ns(idle.sample(rng)).max(1);
    }
    out
}

/// Non-overlapping clutch windows spread across the trial, away from its ends.
fn random_clutch(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vec<Interval> {
    let c = &cfg.clutch;
    if c.channel.is_none() || c.count == 0 {
        return Vec::new();
    }
    let duration = secs_to_ns(cfg.duration_s);
    let slot = duration / (c.count as i64 + 1);
    let mut out = Vec::new();
    for i in 0..c.count as i64 {
        let len = secs_to_ns(uniform(rng, c.min_s, c.max_s));
        let centre = slot * (i + 1);
        let start = (centre - len / 2).max(0);
        let end = (start + len).min(duration);
        if end > start && out.last().is_none_or(|p: &Interval| p.end_ns < start) {
            out.push(Interval {
                start_ns: start,
                end_ns: end,
            });
        }
    }
    out
}

/// Builds a deterministic ground-truth scenario from `(config, seed)`.
///
/// Rig transforms come from the config alone, so trials that share a config
/// share one physical rig.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<GroundTruthScenario> {
    config.validate()?;
    let mut rng = rng_for(seed, SALT_MOTION);
    let duration_ns = secs_to_ns(config.duration_s);
    let left = random_hand(config, config.rig.home_left_cm, &mut rng);
    let right = random_hand(config, config.rig.home_right_cm, &mut rng);

    let mut pedal_presses: BTreeMap<u8, Vec<Interval>> = BTreeMap::new();
    if config.pss.presses.is_empty() {
        let mut channels = config.pss.active_channels.clone();
        channels.sort_unstable();
        channels.dedup();
        for ch in channels
            .into_iter()
            .filter(|c| Some(*c) != config.clutch.channel)
        {
            let p = &config.pss;
            pedal_presses.insert(
                ch,
                random_presses(
                    &mut rng,
                    duration_ns,
                    p.mean_idle_s,
                    p.press_min_s,
                    p.press_max_s,
                ),
            );
        }
    } else {
        for p in &config.pss.presses {
            pedal_presses.entry(p.channel).or_default().push(Interval {
                start_ns: secs_to_ns(p.start_s),
                end_ns: secs_to_ns(p.end_s).min(duration_ns),
            });
        }
        for v in pedal_presses.values_mut() {
            v.sort_by_key(|i| i.start_ns);
        }
    }
    let clutch_intervals = random_clutch(&mut rng, config);
    if let Some(ch) = config.clutch.channel {
        if !clutch_intervals.is_empty() {
            pedal_presses
                .entry(ch)
                .or_default()
                .extend(clutch_intervals.iter().copied());
        }
    }

    let labels: Vec<String> = (1..=8).map(|i| format!("G{i}")).collect();
    let mut gestures = Vec::new();
    for w in left.keyframes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let end = b.t_ns.min(duration_ns);
        if a.offset_cm == b.offset_cm && a.orientation_deg == b.orientation_deg {
            continue;
        }
        if end > a.t_ns {
            let label = labels[rng.random_range(0..labels.len())].clone();
            gestures.push(GestureSegment::new(
                label,
                Timestamp::from_nanos(a.t_ns)?,
                Timestamp::from_nanos(end)?,
            )?);
        }
    }

    let rig = &config.rig;
    let tracker_to_mtm = RigidTransform::from_angles(
        FrameId::Tracker,
        FrameId::Mtm,
        rig.tracker_to_mtm.orientation_deg,
        rig.tracker_to_mtm.translation_cm,
    );
    let camera_to_mtm = RigidTransform::from_angles(
        FrameId::Camera,
        FrameId::Mtm,
        rig.camera_to_mtm.orientation_deg,
        rig.camera_to_mtm.translation_cm,
    );
    let c = &config.controller.mtm_to_psm;
    let mtm_to_psm = RigidTransform::from_angles(
        FrameId::Mtm,
        FrameId::Psm,
        c.orientation_deg,
        c.translation_cm,
    );
    let tracker_to_psm = tracker_to_mtm.then(&mtm_to_psm)?;

    Ok(GroundTruthScenario {
        config: config.clone(),
        seed,
        duration_ns,
        left,
        right,
        pedal_presses,
        clutch_intervals,
        tracker_to_mtm,
        camera_to_mtm,
        mtm_to_psm,
        tracker_to_psm,
        gestures,
    })
}

impl GroundTruthScenario {
    pub fn hand(&self, hand: Hand) -> &HandTruth {
        match hand {
            Hand::Left => &self.left,
            Hand::Right => &self.right,
        }
    }

    /// MTM handle position (cm, M frame) and rotation at `t_ns`.
    pub fn mtm_pose(&self, hand: Hand, t_ns: i64) -> (Vector3<f64>, Matrix3<f64>) {
        let h = self.hand(hand);
        let (offset, orient) = h.sample(t_ns);
        (
            Vector3::from(h.home_cm) + Vector3::from(offset),
            angles_to_matrix(orient),
        )
    }

    pub fn mtm_pose6(&self, hand: Hand, t_ns: i64) -> Pose6Dof {
        let (p, r) = self.mtm_pose(hand, t_ns);
        Pose6Dof::new(p.into(), matrix_to_angles(&r)).expect("MTM pose within working volume")
    }

    pub fn grasper_closed(&self, hand: Hand, t_ns: i64) -> bool {
        any_contains(&self.hand(hand).grasper_closed, t_ns)
    }

    pub fn finger_gap_cm(&self, hand: Hand, t_ns: i64) -> f64 {
        if self.grasper_closed(hand, t_ns) {
            self.config.grasper.closed_gap_cm
        } else {
            self.config.grasper.open_gap_cm
        }
    }

    /// (middle finger, thumb) positions in the M frame, split along the handle's y axis.
    pub fn finger_positions(&self, hand: Hand, t_ns: i64) -> (Vector3<f64>, Vector3<f64>) {
        let (p, r) = self.mtm_pose(hand, t_ns);
        let half = 0.5 * self.finger_gap_cm(hand, t_ns) * r.column(1).into_owned();
        (p + half, p - half)
    }

    pub fn clutched(&self, t_ns: i64) -> bool {
        any_contains(&self.clutch_intervals, t_ns)
    }

    pub fn pedal_pressed(&self, channel: u8, t_ns: i64) -> bool {
        self.pedal_presses
            .get(&channel)
            .is_some_and(|v| any_contains(v, t_ns))
    }

    /// Controller delay in nanoseconds (a whole number of video frames).
    pub fn controller_delay_ns(&self) -> i64 {
        secs_to_ns(self.config.controller.delay_frames as f64 / self.config.video.rate_hz)
    }

    /// MTM position with the motion made while clutched removed, so the
    /// instrument stays put while the surgeon repositions the hands.
    fn clutch_adjusted_position(&self, hand: Hand, t_ns: i64) -> Vector3<f64> {
        let h = self.hand(hand);
        let mut p = h.position(t_ns);
        for c in self.clutch_intervals.iter().filter(|c| c.start_ns < t_ns) {
            p -= h.position(t_ns.min(c.end_ns)) - h.position(c.start_ns);
        }
        p
    }

    /// Commanded instrument pose at `t_ns`: scaled, delayed and clutch-adjusted MTM motion.
    pub fn psm_pose(&self, hand: Hand, t_ns: i64) -> (Vector3<f64>, Matrix3<f64>) {
        let ctl = &self.config.controller;
        let tau = (t_ns - self.controller_delay_ns()).max(0);
        let home = Vector3::from(self.hand(hand).home_cm);
        let p = self.clutch_adjusted_position(hand, tau);
        let scaled = home + ctl.scale * (p - home);
        let (_, r) = self.mtm_pose(hand, tau);
        let perturb = angles_to_matrix(ctl.orientation_perturbation_deg);
        (
            self.mtm_to_psm.apply_point(&scaled),
            self.mtm_to_psm.apply_rotation(&r) * perturb,
        )
    }

    pub fn psm_pose6(&self, hand: Hand, t_ns: i64) -> Pose6Dof {
        let (p, r) = self.psm_pose(hand, t_ns);
        Pose6Dof::new(p.into(), matrix_to_angles(&r)).expect("PSM pose within working volume")
    }

    pub fn psm_grasper_closed(&self, hand: Hand, t_ns: i64) -> bool {
        self.grasper_closed(hand, t_ns - self.controller_delay_ns())
    }

    /// Gesture label at `t_ns`, if any.
    pub fn gesture_at(&self, t_ns: i64) -> Option<&str> {
        self.gestures
            .iter()
            .find(|g| g.start.as_nanos() <= t_ns && t_ns < g.end.as_nanos())
            .map(|g| g.label.as_str())
    }
}
