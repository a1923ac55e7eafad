//! Offline calibration and evaluation of aligned trials against simulator ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::align::AlignedTrial;
use crate::calib::grasper::{estimate_grasper_state, GrasperEstimatorConfig};
use crate::calib::mlp::{
    predict_corrected, train_residual_mlp, CvReport, ResidualMlp, TrainingConfig, TrialPairs,
};
use crate::calib::pedal::{calibrate_pedal_threshold, ThresholdFit};
use crate::calib::rigid::{estimate_rigid, RigidTransform};
use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_json, write_json};
use crate::metrics::{
    axis_metrics, build_report, detection_report, grasper_agreement, pedal_usage, pose_axes,
    raw_pose_axes, PedalRow, Report, TrialAnalysis, UsageRow, UsageSubset,
};
use crate::model::{
    angles_to_matrix, em_sensors_for, matrix_to_angles, FrameId, Hand, PedalMapping, Pose6Dof,
};
use crate::sim::{video_clock_stream, GroundTruthScenario};

pub const SCENARIO_SUFFIX: &str = ".scenario.json";
pub const LABELS_SUFFIX: &str = ".labels.csv";
pub const PSS_THRESHOLDS_FILE: &str = "pss.thresholds.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";

pub fn scenario_path(gt_dir: &Path, session: &str) -> PathBuf {
    gt_dir.join(format!("{session}{SCENARIO_SUFFIX}"))
}

pub fn labels_path(gt_dir: &Path, session: &str) -> PathBuf {
    gt_dir.join(format!("{session}{LABELS_SUFFIX}"))
}

pub fn load_truth(gt_dir: &Path, session: &str) -> Result<GroundTruthScenario> {
    let path = scenario_path(gt_dir, session);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no ground truth for session {session} (expected {})",
            path.display()
        )));
    }
    read_json(&path)
}

/// Scenario time of each recorded video frame, looked up by frame index.
pub fn frame_truth_times(s: &GroundTruthScenario, frame_index: &[u64]) -> Result<Vec<i64>> {
    let v = &s.config.video;
    let clock = video_clock_stream(v.rate_hz, s.config.duration_s, v.jitter_ms, s.seed);
    frame_index
        .iter()
        .map(|&k| {
            clock.get(k as usize).map(|f| f.acquired_ns).ok_or_else(|| {
                Error::invalid(format!("frame {k} is beyond the ground-truth video clock"))
            })
        })
        .collect()
}

/// External sensing modality mapped into a robot frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorSource {
    #[serde(rename = "emht")]
    EmHt,
    #[serde(rename = "handkp")]
    HandKp,
}

impl SensorSource {
    pub const ALL: [SensorSource; 2] = [SensorSource::EmHt, SensorSource::HandKp];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorSource::EmHt => "emht",
            SensorSource::HandKp => "handkp",
        }
    }

    /// Name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            SensorSource::EmHt => "EmHT",
            SensorSource::HandKp => "HandKP",
        }
    }

    pub fn frame(self) -> FrameId {
        match self {
            SensorSource::EmHt => FrameId::Tracker,
            SensorSource::HandKp => FrameId::Camera,
        }
    }
}

impl fmt::Display for SensorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emht" => Ok(SensorSource::EmHt),
            "handkp" => Ok(SensorSource::HandKp),
            other => Err(Error::invalid(format!(
                "unknown sensor source `{other}` (emht, handkp)"
            ))),
        }
    }
}

fn robot_label(f: FrameId) -> &'static str {
    match f {
        FrameId::Mtm => "MTM",
        FrameId::Psm => "PSM",
        FrameId::Tracker => "T",
        FrameId::Camera => "C",
    }
}

/// File stem of a calibrated pair, e.g. `emht-M`.
pub fn pair_key(src: SensorSource, target: FrameId) -> String {
    format!("{}-{}", src.as_str(), target)
}

/// One hand's track from an external sensor, per aligned frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrack {
    pub positions: Vec<Vector3<f64>>,
    /// Present for sources that measure orientation.
    pub rotations: Option<Vec<Matrix3<f64>>>,
    /// Frames where the source actually reported (not gap-filled).
    pub valid: Vec<bool>,
}

fn group_err(trial: &AlignedTrial, name: &str) -> Error {
    Error::invalid(format!("trial {} has no `{name}` columns", trial.name))
}

fn vec3(g: &crate::align::ColumnGroup, fields: [&str; 3], k: usize) -> Vector3<f64> {
    let f = |n| g.field(n).map_or(f64::NAN, |v| v[k]);
    Vector3::new(f(fields[0]), f(fields[1]), f(fields[2]))
}

/// Hand position per frame: the midpoint of the two finger sensors (EmHT,
/// orientation from the middle-finger sensor) or of the thumb and index tips (HandKP).
pub fn source_track(trial: &AlignedTrial, src: SensorSource, hand: Hand) -> Result<SourceTrack> {
    let n = trial.len();
    match src {
        SensorSource::EmHt => {
            let (m, t) = em_sensors_for(hand);
            let (gm_name, gt_name) = (format!("em{m}"), format!("em{t}"));
            let gm = trial
                .group(&gm_name)
                .ok_or_else(|| group_err(trial, &gm_name))?;
            let gt = trial
                .group(&gt_name)
                .ok_or_else(|| group_err(trial, &gt_name))?;
            let pos = ["x_cm", "y_cm", "z_cm"];
            let ang = ["azimuth_deg", "elevation_deg", "roll_deg"];
            Ok(SourceTrack {
                positions: (0..n)
                    .map(|k| 0.5 * (vec3(gm, pos, k) + vec3(gt, pos, k)))
                    .collect(),
                rotations: Some(
                    (0..n)
                        .map(|k| angles_to_matrix(vec3(gm, ang, k).into()))
                        .collect(),
                ),
                valid: (0..n).map(|k| !gm.missing[k] && !gt.missing[k]).collect(),
            })
        }
        SensorSource::HandKp => {
            let name = format!("kp_{}", hand.as_str());
            let g = trial.group(&name).ok_or_else(|| group_err(trial, &name))?;
            let thumb = ["thumb_x_cm", "thumb_y_cm", "thumb_z_cm"];
            let index = ["index_x_cm", "index_y_cm", "index_z_cm"];
            Ok(SourceTrack {
                positions: (0..n)
                    .map(|k| 0.5 * (vec3(g, thumb, k) + vec3(g, index, k)))
                    .collect(),
                rotations: None,
                valid: g.missing.iter().map(|m| !m).collect(),
            })
        }
    }
}

/// Ground-truth handle pose of `hand` in the robot frame `target` at scenario time `t_ns`.
pub fn truth_pose(
    s: &GroundTruthScenario,
    target: FrameId,
    hand: Hand,
    t_ns: i64,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    match target {
        FrameId::Mtm => Ok(s.mtm_pose(hand, t_ns)),
        FrameId::Psm => Ok(s.psm_pose(hand, t_ns)),
        other => Err(Error::invalid(format!(
            "target frame must be M or P, got {other}"
        ))),
    }
}

/// An aligned trial together with its ground truth.
#[derive(Debug, Clone)]
pub struct TrialWithTruth {
    pub trial: AlignedTrial,
    pub truth: GroundTruthScenario,
    /// Scenario time of every aligned frame.
    pub truth_times: Vec<i64>,
}

impl TrialWithTruth {
    pub fn new(trial: AlignedTrial, truth: GroundTruthScenario) -> Result<Self> {
        let truth_times = frame_truth_times(&truth, &trial.frame_index)?;
        Ok(TrialWithTruth {
            trial,
            truth,
            truth_times,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub pairs: Vec<SensorSource>,
    pub targets: Vec<FrameId>,
    pub training: TrainingConfig,
    /// Every `stride`-th frame is used as a correspondence.
    pub stride: usize,
    /// Number of cross-validation folds; `None` is one fold per trial.
    pub folds: Option<usize>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            pairs: SensorSource::ALL.to_vec(),
            targets: vec![FrameId::Mtm],
            training: TrainingConfig::default(),
            stride: 3,
            folds: None,
        }
    }
}

/// Calibrated maps and pedal thresholds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calibration {
    pub rigid: BTreeMap<String, RigidTransform>,
    pub models: BTreeMap<String, ResidualMlp>,
    pub cv: BTreeMap<String, CvReport>,
    pub pss: BTreeMap<u8, ThresholdFit>,
}

impl Calibration {
    pub fn pss_thresholds(&self) -> BTreeMap<u8, f64> {
        self.pss.iter().map(|(c, f)| (*c, f.threshold)).collect()
    }

    /// Calibrated pairs present, in key order.
    pub fn pairs(&self) -> Vec<(SensorSource, FrameId)> {
        let mut out = Vec::new();
        for src in SensorSource::ALL {
            for t in [FrameId::Mtm, FrameId::Psm] {
                let key = pair_key(src, t);
                if self.rigid.contains_key(&key) && self.models.contains_key(&key) {
                    out.push((src, t));
                }
            }
        }
        out
    }
}

/// Correspondences `(source position, truth position)` for one trial,
/// valid source frames only, clutched frames skipped when targeting the PSM.
fn trial_pairs(
    t: &TrialWithTruth,
    src: SensorSource,
    target: FrameId,
    stride: usize,
) -> Result<TrialPairs> {
    let mut source = Vec::new();
    let mut truth = Vec::new();
    for hand in Hand::BOTH {
        let track = source_track(&t.trial, src, hand)?;
        for k in (0..t.trial.len()).step_by(stride.max(1)) {
            let tt = t.truth_times[k];
            if !track.valid[k] || (target == FrameId::Psm && t.truth.clutched(tt)) {
                continue;
            }
            source.push(track.positions[k]);
            truth.push(truth_pose(&t.truth, target, hand, tt)?.0);
        }
    }
    Ok(TrialPairs {
        trial: t.trial.name.clone(),
        source,
        truth,
    })
}

/// Merges per-trial pairs into `k` folds, trial `i` going to fold `i mod k`.
fn into_folds(trials: Vec<TrialPairs>, k: usize) -> Result<Vec<TrialPairs>> {
    if k < 2 || k > trials.len() {
        return Err(Error::invalid(format!(
            "fold count {k} must lie in 2..={}",
            trials.len()
        )));
    }
    let mut folds: Vec<TrialPairs> = (0..k)
        .map(|_| TrialPairs {
            trial: String::new(),
            source: Vec::new(),
            truth: Vec::new(),
        })
        .collect();
    for (i, t) in trials.into_iter().enumerate() {
        let f = &mut folds[i % k];
        if !f.trial.is_empty() {
            f.trial.push('+');
        }
        f.trial.push_str(&t.trial);
        f.source.extend(t.source);
        f.truth.extend(t.truth);
    }
    Ok(folds)
}

/// Rigid map estimated on every trial's correspondences, then a residual MLP
/// with cross-validation, for each requested pair; plus per-channel pedal thresholds.
pub fn calibrate(trials: &[TrialWithTruth], opts: &CalibrationOptions) -> Result<Calibration> {
    if trials.len() < 2 {
        return Err(Error::invalid(format!(
            "calibration needs at least 2 trials for cross-validation, got {}",
            trials.len()
        )));
    }
    let mut out = Calibration::default();
    for &src in &opts.pairs {
        for &target in &opts.targets {
            let key = pair_key(src, target);
            let per_trial: Vec<TrialPairs> = trials
                .iter()
                .map(|t| trial_pairs(t, src, target, opts.stride))
                .collect::<Result<_>>()?;
            let all_src: Vec<Vector3<f64>> = per_trial
                .iter()
                .flat_map(|p| p.source.iter().copied())
                .collect();
            let all_dst: Vec<Vector3<f64>> = per_trial
                .iter()
                .flat_map(|p| p.truth.iter().copied())
                .collect();
            let rigid = estimate_rigid(src.frame(), target, &all_src, &all_dst)?;
            let folds = match opts.folds {
                Some(k) => into_folds(per_trial, k)?,
                None => per_trial,
            };
            let (model, cv) = train_residual_mlp(&folds, &rigid, &opts.training)?;
            log::info!(
                "{key}: rigid RMSE {:.3} cm, corrected {:.3} cm over {} folds",
                cv.mean_rigid_rmse_cm,
                cv.mean_corrected_rmse_cm,
                cv.folds.len()
            );
            out.rigid.insert(key.clone(), rigid);
            out.models.insert(key.clone(), model);
            out.cv.insert(key, cv);
        }
    }
    out.pss = calibrate_pss(trials)?;
    Ok(out)
}

/// Per-channel threshold pooled over every trial; channels never pressed are skipped.
pub fn calibrate_pss(trials: &[TrialWithTruth]) -> Result<BTreeMap<u8, ThresholdFit>> {
    let mut pooled: BTreeMap<u8, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for t in trials {
        for (ch, volts) in pss_channels(&t.trial) {
            let e = pooled.entry(ch).or_default();
            e.0.extend_from_slice(volts);
            e.1.extend(
                t.truth_times
                    .iter()
                    .map(|&tt| u8::from(t.truth.pedal_pressed(ch, tt))),
            );
        }
    }
    let mut out = BTreeMap::new();
    for (ch, (v, truth)) in pooled {
        if !truth.contains(&1) || !truth.contains(&0) {
            log::warn!("pedal channel {ch}: truth has one class only, threshold not calibrated");
            continue;
        }
        out.insert(ch, calibrate_pedal_threshold(&v, &truth)?);
    }
    Ok(out)
}

fn pss_channels(trial: &AlignedTrial) -> Vec<(u8, &[f64])> {
    trial
        .groups
        .iter()
        .filter_map(|g| {
            let ch: u8 = g.name.strip_prefix("pss")?.parse().ok()?;
            Some((ch, g.field("voltage_v")?))
        })
        .collect()
}

pub fn write_calibration(c: &Calibration, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir_all(dir)?;
    let mut files = Vec::new();
    for (key, rigid) in &c.rigid {
        let p = dir.join(format!("{key}.rigid.json"));
        write_json(&p, rigid)?;
        files.push(p);
    }
    for (key, model) in &c.models {
        let p = dir.join(format!("{key}.mlp.json"));
        write_json(&p, model)?;
        files.push(p);
    }
    let p = dir.join(CV_REPORT_FILE);
    write_json(&p, &c.cv)?;
    files.push(p);
    let p = dir.join(PSS_THRESHOLDS_FILE);
    write_json(&p, &c.pss)?;
    files.push(p);
    Ok(files)
}

/// Loads whatever pairs and thresholds a calibration directory holds.
pub fn read_calibration(dir: &Path) -> Result<Calibration> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!(
            "calibration directory {} not found",
            dir.display()
        )));
    }
    let mut c = Calibration::default();
    for src in SensorSource::ALL {
        for t in [FrameId::Mtm, FrameId::Psm] {
            let key = pair_key(src, t);
            let rigid = dir.join(format!("{key}.rigid.json"));
            let mlp = dir.join(format!("{key}.mlp.json"));
            if rigid.exists() && mlp.exists() {
                c.rigid.insert(key.clone(), read_json(&rigid)?);
                c.models.insert(key, read_json(&mlp)?);
            }
        }
    }
    let cv = dir.join(CV_REPORT_FILE);
    if cv.exists() {
        c.cv = read_json(&cv)?;
    }
    let pss = dir.join(PSS_THRESHOLDS_FILE);
    if pss.exists() {
        c.pss = read_json(&pss)?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub grasper: GrasperEstimatorConfig,
    /// Largest lag searched, in frames.
    pub max_lag_frames: usize,
    pub platform: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            grasper: GrasperEstimatorConfig::default(),
            max_lag_frames: 15,
            platform: "sim".into(),
        }
    }
}

fn pose(p: &Vector3<f64>, r: &Matrix3<f64>) -> Result<Pose6Dof> {
    Pose6Dof::new((*p).into(), matrix_to_angles(r))
}

/// Every metric family for one trial.
pub fn evaluate_trial(
    t: &TrialWithTruth,
    calib: &Calibration,
    mapping: &[PedalMapping],
    opts: &EvalOptions,
) -> Result<TrialAnalysis> {
    let trial = &t.trial;
    let tt = &t.truth_times;
    let mut a = TrialAnalysis {
        trial: trial.name.clone(),
        ..TrialAnalysis::default()
    };

    for (src, target) in calib.pairs() {
        let key = pair_key(src, target);
        let (rigid, model) = (&calib.rigid[&key], &calib.models[&key]);
        for hand in Hand::BOTH {
            let track = source_track(trial, src, hand)?;
            let mut gt = Vec::with_capacity(trial.len());
            let mut corrected = Vec::with_capacity(trial.len());
            let mut rigid_only = Vec::with_capacity(trial.len());
            for k in 0..trial.len() {
                let (gp, gr) = truth_pose(&t.truth, target, hand, tt[k])?;
                gt.push(pose(&gp, &gr)?);
                // Position-only sources borrow the truth orientation; only positions are scored for them.
                let r = match &track.rotations {
                    Some(rs) => rigid.apply_rotation(&rs[k]),
                    None => gr,
                };
                let p = &track.positions[k];
                let angles = matrix_to_angles(&r);
                corrected.push((predict_corrected(rigid, model, p)?.into(), angles));
                rigid_only.push((rigid.apply_point(p).into(), angles));
            }
            let positions_only = track.rotations.is_none();
            let name = format!("{}-{}/{}", src.label(), robot_label(target), hand.as_str());
            a.trajectories.push((
                name.clone(),
                axis_metrics(&raw_pose_axes(&corrected), &pose_axes(&gt), positions_only)?,
            ));
            a.trajectories.push((
                format!("{name}/rigid"),
                axis_metrics(&raw_pose_axes(&rigid_only), &pose_axes(&gt), positions_only)?,
            ));
        }
    }

    for hand in Hand::BOTH {
        let truth: Vec<u8> = tt
            .iter()
            .map(|&x| u8::from(t.truth.grasper_closed(hand, x)))
            .collect();
        let (m, th) = em_sensors_for(hand);
        if trial.group(&format!("em{m}")).is_some() && trial.group(&format!("em{th}")).is_some() {
            let pos = |name: String| -> Result<Vec<Vector3<f64>>> {
                let g = trial.group(&name).ok_or_else(|| group_err(trial, &name))?;
                Ok((0..trial.len())
                    .map(|k| vec3(g, ["x_cm", "y_cm", "z_cm"], k))
                    .collect())
            };
            let pred = estimate_grasper_state(
                &pos(format!("em{m}"))?,
                &pos(format!("em{th}"))?,
                &opts.grasper,
            )?;
            a.graspers.push((
                format!("EmHT-MTM/{}", hand.as_str()),
                grasper_agreement(&pred, &truth)?,
            ));
        }
        let psm: Vec<u8> = tt
            .iter()
            .map(|&x| u8::from(t.truth.psm_grasper_closed(hand, x)))
            .collect();
        a.graspers.push((
            format!("PSM-MTM/{}", hand.as_str()),
            grasper_agreement(&psm, &truth)?,
        ));
    }

    let mut gt_states: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    for g in &trial.groups {
        let Some(ch) = g
            .name
            .strip_prefix("pss")
            .and_then(|c| c.parse::<u8>().ok())
        else {
            continue;
        };
        let pred: Vec<u8> = g
            .field("state")
            .ok_or_else(|| group_err(trial, &g.name))?
            .iter()
            .map(|&v| u8::from(v >= 0.5))
            .collect();
        let gt: Vec<u8> = tt
            .iter()
            .map(|&x| u8::from(t.truth.pedal_pressed(ch, x)))
            .collect();
        if gt.contains(&1) {
            let d = detection_report(&pred, &gt, trial.rate_hz, opts.max_lag_frames)?;
            a.pedals.push(PedalRow {
                platform: opts.platform.clone(),
                channel: ch.to_string(),
                f1: d.f1,
                precision: d.precision,
                recall: d.recall,
                iou: d.temporal_iou,
                lag_ms: d.lag_ms,
            });
        }
        all_pred.extend_from_slice(&pred);
        all_gt.extend_from_slice(&gt);
        if mapping.iter().any(|m| m.channel == ch) {
            gt_states.insert(ch, gt);
        }
    }
    if all_gt.contains(&1) {
        // Pooled over channels; lag is only meaningful per channel.
        let d = detection_report(&all_pred, &all_gt, trial.rate_hz, 0)?;
        a.pedals.push(PedalRow {
            platform: opts.platform.clone(),
            channel: "all".into(),
            f1: d.f1,
            precision: d.precision,
            recall: d.recall,
            iou: d.temporal_iou,
            lag_ms: None,
        });
    }
    if !gt_states.is_empty() {
        for subset in [UsageSubset::Energy, UsageSubset::All] {
            match pedal_usage(&gt_states, mapping, &subset) {
                Ok(rows) => a.usage.extend(rows.into_iter().map(|u| UsageRow {
                    subset: subset.label(),
                    pedal: u.pedal,
                    percent: u.percent,
                })),
                Err(e) => log::warn!(
                    "{}: usage subset {} skipped: {e}",
                    trial.name,
                    subset.label()
                ),
            }
        }
    }
    Ok(a)
}

/// Evaluates every trial and renders the averaged report.
pub fn evaluate(
    trials: &[(TrialWithTruth, Vec<PedalMapping>)],
    calib: &Calibration,
    opts: &EvalOptions,
) -> Result<(Vec<TrialAnalysis>, Report)> {
    if trials.is_empty() {
        return Err(Error::invalid("no trials to evaluate"));
    }
    let analyses: Vec<TrialAnalysis> = trials
        .iter()
        .map(|(t, m)| evaluate_trial(t, calib, m, opts))
        .collect::<Result<_>>()?;
    let report = build_report(&analyses)?;
    Ok((analyses, report))
}
