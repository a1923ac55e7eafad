//! Cross-modal validation metrics.

mod report;
mod vision;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use report::{
    build_report, write_report, AxisMetric, PedalRow, Report, TrialAnalysis, UsageRow,
};
pub use vision::{extract_pedal_gt_from_frames, Roi};

use crate::error::{Error, Result};
use crate::model::{is_energy_pedal, PedalMapping, Pose6Dof};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LengthMismatch { left: a, right: b })
    }
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Cosine of the angle between the mean-centered series.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("cosine similarity needs at least 2 samples"));
    }
    let (ca, cb) = (centered(a), centered(b));
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("constant series has no direction".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `100 · RMSE(pred, gt) / (max(gt) − min(gt))`.
pub fn nrmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if gt.is_empty() {
        return Err(Error::invalid("empty series"));
    }
    let max = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = gt.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::Degenerate("ground truth has zero range".into()));
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    Ok(100.0 * mse.sqrt() / range)
}

/// Frame-level confusion counts of two binary series (nonzero = positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count(pred: &[u8], gt: &[u8]) -> Result<Self> {
        same_len(pred.len(), gt.len())?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, which equals `2PR/(P+R)` and is 0 when undefined.
    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// F1 as an exact fraction, for tie-free comparisons.
    pub fn f1_fraction(&self) -> (u64, u64) {
        (2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    /// Positive-class intersection over union; 1 when neither series has positives.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn detection_metrics(pred: &[u8], gt: &[u8]) -> Result<Detection> {
    let c = Confusion::count(pred, gt)?;
    Ok(Detection {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub temporal_iou: f64,
    /// Absent when either series has no positives.
    pub lag_ms: Option<f64>,
}

/// Detection, interval IoU and lag of a predicted binary series against truth.
pub fn detection_report(
    pred: &[u8],
    gt: &[u8],
    rate_hz: f64,
    max_shift: usize,
) -> Result<DetectionReport> {
    let d = detection_metrics(pred, gt)?;
    let iou = temporal_iou(
        &frames_to_intervals(pred, rate_hz),
        &frames_to_intervals(gt, rate_hz),
    )?;
    let lag_ms = if pred.iter().any(|&v| v != 0) && gt.iter().any(|&v| v != 0) {
        Some(estimate_lag(
            pred,
            gt,
            rate_hz,
            max_shift.min(pred.len().saturating_sub(1) / 2),
        )?)
    } else {
        None
    };
    Ok(DetectionReport {
        precision: d.precision,
        recall: d.recall,
        f1: d.f1,
        temporal_iou: iou,
        lag_ms,
    })
}

/// Closed interval bounds on a continuous time axis (any unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Self {
        TimeInterval { start, end }
    }
}

fn merged(intervals: &[TimeInterval]) -> Result<Vec<TimeInterval>> {
    for i in intervals {
        if !(i.start.is_finite() && i.end.is_finite() && i.end > i.start) {
            return Err(Error::invalid(format!(
                "malformed interval [{}, {}]",
                i.start, i.end
            )));
        }
    }
    let mut v = intervals.to_vec();
    v.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<TimeInterval> = Vec::with_capacity(v.len());
    for i in v {
        match out.last_mut() {
            Some(last) if i.start <= last.end => last.end = last.end.max(i.end),
            _ => out.push(i),
        }
    }
    Ok(out)
}

fn total(v: &[TimeInterval]) -> f64 {
    v.iter().map(|i| i.end - i.start).sum()
}

/// Duration of the intersection over duration of the union of two interval sets.
pub fn temporal_iou(pred: &[TimeInterval], gt: &[TimeInterval]) -> Result<f64> {
    let (p, g) = (merged(pred)?, merged(gt)?);
    if p.is_empty() && g.is_empty() {
        return Ok(1.0);
    }
    let (mut i, mut j, mut inter) = (0, 0, 0.0);
    while i < p.len() && j < g.len() {
        let lo = p[i].start.max(g[j].start);
        let hi = p[i].end.min(g[j].end);
        if hi > lo {
            inter += hi - lo;
        }
        if p[i].end < g[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = total(&p) + total(&g) - inter;
    Ok(inter / union)
}

/// Runs of positive frames as intervals, frame `k` covering `[k/rate, (k+1)/rate)` seconds.
pub fn frames_to_intervals(series: &[u8], rate_hz: f64) -> Vec<TimeInterval> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &v) in series.iter().chain(std::iter::once(&0)).enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push(TimeInterval::new(s as f64 / rate_hz, k as f64 / rate_hz));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Shift `k` maximizing the agreement fraction between `pred[i + k]` and
/// `gt[i]` over their overlap, reported as `1000·k/rate` ms. Positive means
/// the prediction lags. Ties go to the smallest `|k|`, then the positive shift.
pub fn estimate_lag(pred: &[u8], gt: &[u8], rate_hz: f64, max_shift: usize) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let n = pred.len();
    if 2 * max_shift >= n {
        return Err(Error::invalid(format!(
            "max shift {max_shift} must be below half the series length {n}"
        )));
    }
    if !pred.iter().any(|&v| v != 0) || !gt.iter().any(|&v| v != 0) {
        return Err(Error::Degenerate(
            "lag needs positives in both series".into(),
        ));
    }
    let agreement = |k: i64| -> (u64, u64) {
        let mut hits = 0;
        let mut overlap = 0;
        for i in 0..n as i64 {
            let j = i + k;
            if (0..n as i64).contains(&j) {
                overlap += 1;
                hits += u64::from((pred[j as usize] != 0) == (gt[i as usize] != 0));
            }
        }
        (hits, overlap)
    };
    let mut best_k = 0i64;
    let mut best = agreement(0);
    for m in 1..=max_shift as i64 {
        for k in [m, -m] {
            let a = agreement(k);
            if (a.0 as u128) * (best.1 as u128) > (best.0 as u128) * (a.1 as u128) {
                best = a;
                best_k = k;
            }
        }
    }
    Ok(1000.0 * best_k as f64 / rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrasperAgreement {
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
}

/// Closed-state IoU, overall accuracy and precision of closed predictions.
pub fn grasper_agreement(pred: &[u8], gt: &[u8]) -> Result<GrasperAgreement> {
    let c = Confusion::count(pred, gt)?;
    Ok(GrasperAgreement {
        iou: c.iou(),
        accuracy: c.accuracy(),
        precision: c.precision(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UsageSubset {
    All,
    Energy,
    Channels(Vec<u8>),
}

impl UsageSubset {
    pub fn label(&self) -> String {
        match self {
            UsageSubset::All => "all".into(),
            UsageSubset::Energy => "energy".into(),
            UsageSubset::Channels(c) => {
                let parts: Vec<String> = c.iter().map(u8::to_string).collect();
                format!("channels:{}", parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedalUsage {
    pub channel: u8,
    pub pedal: String,
    pub pressed_frames: u64,
    pub percent: f64,
}

/// Share of pressed frames per pedal, normalized over the pedals in `subset`.
pub fn pedal_usage(
    states: &BTreeMap<u8, Vec<u8>>,
    mapping: &[PedalMapping],
    subset: &UsageSubset,
) -> Result<Vec<PedalUsage>> {
    for ch in states.keys() {
        if !mapping.iter().any(|m| m.channel == *ch) {
            return Err(Error::invalid(format!(
                "channel {ch} is not in the pedal mapping"
            )));
        }
    }
    let mut chosen: Vec<&PedalMapping> = mapping
        .iter()
        .filter(|m| match subset {
            UsageSubset::All => true,
            UsageSubset::Energy => is_energy_pedal(&m.pedal),
            UsageSubset::Channels(c) => c.contains(&m.channel),
        })
        .collect();
    if chosen.is_empty() {
        return Err(Error::invalid(format!(
            "usage subset `{}` is empty",
            subset.label()
        )));
    }
    chosen.sort_by_key(|m| m.channel);
    let counts: Vec<u64> = chosen
        .iter()
        .map(|m| {
            states
                .get(&m.channel)
                .map_or(0, |s| s.iter().filter(|&&v| v != 0).count() as u64)
        })
        .collect();
    let sum: u64 = counts.iter().sum();
    Ok(chosen
        .iter()
        .zip(counts)
        .map(|(m, c)| PedalUsage {
            channel: m.channel,
            pedal: m.pedal.clone(),
            pressed_frames: c,
            percent: if sum == 0 {
                0.0
            } else {
                100.0 * c as f64 / sum as f64
            },
        })
        .collect())
}

/// Removes ±360° jumps between consecutive samples.
pub fn unwrap_degrees(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut offset: f64 = 0.0;
    for (i, &v) in series.iter().enumerate() {
        if i > 0 {
            let d: f64 = v + offset - out[i - 1];
            offset -= 360.0 * (d / 360.0).round();
        }
        out.push(v + offset);
    }
    out
}

pub const POSITION_AXES: [&str; 3] = ["X", "Y", "Z"];
pub const ORIENTATION_AXES: [&str; 3] = ["roll", "pitch", "yaw"];

/// Per-axis series of a pose sequence: X, Y, Z, then roll, pitch, yaw (unwrapped).
pub fn pose_axes(poses: &[Pose6Dof]) -> [Vec<f64>; 6] {
    let raw: Vec<([f64; 3], [f64; 3])> =
        poses.iter().map(|p| (p.position, p.orientation)).collect();
    raw_pose_axes(&raw)
}

/// [`pose_axes`] for unvalidated (position, orientation) pairs, such as
/// mapped estimates that may leave the tracker's working volume.
pub fn raw_pose_axes(poses: &[([f64; 3], [f64; 3])]) -> [Vec<f64>; 6] {
    let pos = |j: usize| poses.iter().map(|p| p.0[j]).collect::<Vec<_>>();
    let ang = |j: usize| unwrap_degrees(&poses.iter().map(|p| p.1[j]).collect::<Vec<_>>());
    // Orientation is stored (azimuth, elevation, roll) = (yaw, pitch, roll).
    [pos(0), pos(1), pos(2), ang(2), ang(1), ang(0)]
}

/// CoS and NRMSE per axis. Orientation axes are skipped when `positions_only`.
pub fn trajectory_metrics(
    pred: &[Pose6Dof],
    gt: &[Pose6Dof],
    positions_only: bool,
) -> Result<Vec<AxisMetric>> {
    same_len(pred.len(), gt.len())?;
    axis_metrics(&pose_axes(pred), &pose_axes(gt), positions_only)
}

/// CoS and NRMSE per axis of series laid out as by [`pose_axes`].
pub fn axis_metrics(
    p: &[Vec<f64>; 6],
    g: &[Vec<f64>; 6],
    positions_only: bool,
) -> Result<Vec<AxisMetric>> {
    let names = POSITION_AXES.iter().chain(ORIENTATION_AXES.iter());
    let n = if positions_only { 3 } else { 6 };
    names
        .take(n)
        .enumerate()
        .map(|(j, axis)| {
            same_len(p[j].len(), g[j].len())?;
            // Angles are compared on the same branch as the truth.
            let pj: Vec<f64> = if j >= 3 {
                let shift = 360.0 * ((mean(&g[j]) - mean(&p[j])) / 360.0).round();
                p[j].iter().map(|v| v + shift).collect()
            } else {
                p[j].clone()
            };
            Ok(AxisMetric {
                axis: (*axis).to_string(),
                cos: cosine_similarity(&pj, &g[j])?,
                nrmse_pct: nrmse(&pj, &g[j])?,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimates_outside_the_working_volume_are_scored() {
        let gt: Vec<Pose6Dof> = (0..10)
            .map(|k| {
                Pose6Dof::new([95.0 + 0.5 * k as f64, (k % 3) as f64, k as f64], [0.0; 3]).unwrap()
            })
            .collect();
        let est: Vec<([f64; 3], [f64; 3])> = gt
            .iter()
            .map(|p| {
                (
                    [p.position[0] + 3.0, p.position[1], p.position[2]],
                    [0.0; 3],
                )
            })
            .collect();
        let m = axis_metrics(&raw_pose_axes(&est), &pose_axes(&gt), true).unwrap();
        assert_eq!(m.len(), 3);
        assert!((m[0].cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let o = cosine_similarity(&[1.0, 0.0, -1.0, 0.0], &[0.0, 1.0, 0.0, -1.0]).unwrap();
        assert!(o.abs() < 1e-12);
        assert!(cosine_similarity(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn nrmse_examples() {
        let gt = [0.0, 5.0, 10.0, 2.0];
        assert_eq!(nrmse(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 1.0).collect();
        assert!((nrmse(&shifted, &gt).unwrap() - 10.0).abs() < 1e-12);
        assert!(nrmse(&[1.0, 1.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn detection_examples() {
        let gt = [1, 0, 1, 0];
        let d = detection_metrics(&gt, &gt).unwrap();
        assert_eq!((d.precision, d.recall, d.f1), (1.0, 1.0, 1.0));
        let d = detection_metrics(&[1, 1, 1, 1], &gt).unwrap();
        assert_eq!((d.precision, d.recall), (0.5, 1.0));
        assert!((d.f1 - 2.0 / 3.0).abs() < 1e-12);
        let d = detection_metrics(&[0, 0, 0, 0], &gt).unwrap();
        assert_eq!((d.recall, d.f1), (0.0, 0.0));
        assert!(detection_metrics(&[0], &gt).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = [TimeInterval::new(0.0, 2.0)];
        let b = [TimeInterval::new(1.0, 3.0)];
        assert!((temporal_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(temporal_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            temporal_iou(&a, &[TimeInterval::new(5.0, 6.0)]).unwrap(),
            0.0
        );
        assert_eq!(temporal_iou(&[], &[]).unwrap(), 1.0);
        assert!(temporal_iou(&[TimeInterval::new(2.0, 2.0)], &a).is_err());
    }

    #[test]
    fn lag_examples() {
        let mut gt = vec![0u8; 120];
        gt[30..60].iter_mut().for_each(|v| *v = 1);
        gt[80..95].iter_mut().for_each(|v| *v = 1);
        assert_eq!(estimate_lag(&gt, &gt, 30.0, 15).unwrap(), 0.0);
        for k in [4usize, 5] {
            let mut pred = vec![0u8; 120];
            pred[k..].copy_from_slice(&gt[..120 - k]);
            let lag = estimate_lag(&pred, &gt, 30.0, 15).unwrap();
            assert!((lag - 1000.0 * k as f64 / 30.0).abs() < 1e-9);
        }
        assert!(estimate_lag(&[0; 10], &[1; 10], 30.0, 2).is_err());
        assert!(estimate_lag(&gt, &gt, 30.0, 60).is_err());
    }

    #[test]
    fn lag_tie_prefers_positive() {
        // A single positive frame in each, one apart in both directions is impossible,
        // so build a symmetric case: pred has positives on both sides of gt.
        let gt = [0, 0, 0, 1, 0, 0, 0, 0];
        let pred = [0, 0, 1, 0, 1, 0, 0, 0];
        assert!((estimate_lag(&pred, &gt, 1.0, 1).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn grasper_examples() {
        let gt = [1, 1, 0, 0, 0];
        let g = grasper_agreement(&gt, &gt).unwrap();
        assert_eq!((g.iou, g.accuracy, g.precision), (1.0, 1.0, 1.0));
        let g = grasper_agreement(&[0; 5], &gt).unwrap();
        assert_eq!((g.iou, g.accuracy), (0.0, 0.6));
    }

    #[test]
    fn usage_examples() {
        let mapping = crate::model::da_vinci_pedal_mapping();
        let mut states = BTreeMap::new();
        states.insert(4u8, [vec![1u8; 7079], vec![0u8; 2921]].concat());
        states.insert(3u8, [vec![1u8; 2921], vec![0u8; 7079]].concat());
        states.insert(6u8, vec![0u8; 10000]);
        let u = pedal_usage(&states, &mapping, &UsageSubset::Energy).unwrap();
        let right = u.iter().find(|p| p.channel == 4).unwrap();
        assert!((right.percent - 70.79).abs() < 1e-9);
        let all = pedal_usage(&states, &mapping, &UsageSubset::All).unwrap();
        assert_eq!(all.iter().find(|p| p.channel == 6).unwrap().percent, 0.0);
        assert!(pedal_usage(&states, &mapping, &UsageSubset::Channels(vec![9])).is_err());
    }

    #[test]
    fn unwrap_removes_seam() {
        let u = unwrap_degrees(&[170.0, 179.0, -178.0, -170.0]);
        assert_eq!(u, vec![170.0, 179.0, 182.0, 190.0]);
    }

    #[test]
    fn frame_intervals() {
        let iv = frames_to_intervals(&[0, 1, 1, 0, 1], 10.0);
        assert_eq!(
            iv,
            vec![TimeInterval::new(0.1, 0.3), TimeInterval::new(0.4, 0.5)]
        );
    }
}
