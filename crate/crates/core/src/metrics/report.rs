use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GrasperAgreement;
use crate::error::{Error, Result};
use crate::io::{create_dir_all, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMetric {
    pub axis: String,
    pub cos: f64,
    pub nrmse_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedalRow {
    pub platform: String,
    /// Channel number, or `all` for the pooled row.
    pub channel: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub lag_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub subset: String,
    pub pedal: String,
    pub percent: f64,
}

/// Everything measured on one trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialAnalysis {
    pub trial: String,
    pub trajectories: Vec<(String, Vec<AxisMetric>)>,
    pub pedals: Vec<PedalRow>,
    pub graspers: Vec<(String, GrasperAgreement)>,
    pub usage: Vec<UsageRow>,
}

/// Rendered report files, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub trials: usize,
    pub files: Vec<(String, String)>,
}

impl Report {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_str())
    }
}

/// Running means keyed in first-seen order.
struct Averager<K: PartialEq> {
    rows: Vec<(K, Vec<f64>, Vec<usize>)>,
}

impl<K: PartialEq> Averager<K> {
    fn new() -> Self {
        Averager { rows: Vec::new() }
    }

    fn add(&mut self, key: K, values: &[Option<f64>]) {
        let idx = match self.rows.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                self.rows
                    .push((key, vec![0.0; values.len()], vec![0; values.len()]));
                self.rows.len() - 1
            }
        };
        let (_, sums, counts) = &mut self.rows[idx];
        for (j, v) in values.iter().enumerate() {
            if let Some(v) = v {
                sums[j] += v;
                counts[j] += 1;
            }
        }
    }

    fn means(&self) -> impl Iterator<Item = (&K, Vec<Option<f64>>)> {
        self.rows.iter().map(|(k, s, c)| {
            let m = s
                .iter()
                .zip(c)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect();
            (k, m)
        })
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn txt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Averages every metric across trials and renders the CSV and text files.
pub fn build_report(analyses: &[TrialAnalysis]) -> Result<Report> {
    if analyses.is_empty() {
        return Err(Error::invalid("no trial analyses to report"));
    }
    let mut traj = Averager::new();
    let mut pedal = Averager::new();
    let mut grasp = Averager::new();
    let mut usage = Averager::new();
    for a in analyses {
        for (pair, axes) in &a.trajectories {
            for m in axes {
                traj.add(
                    (pair.clone(), m.axis.clone()),
                    &[Some(m.cos), Some(m.nrmse_pct)],
                );
            }
        }
        for p in &a.pedals {
            pedal.add(
                (p.platform.clone(), p.channel.clone()),
                &[
                    Some(p.f1),
                    Some(p.precision),
                    Some(p.recall),
                    Some(p.iou),
                    p.lag_ms,
                ],
            );
        }
        for (pair, g) in &a.graspers {
            grasp.add(
                pair.clone(),
                &[Some(g.iou), Some(g.accuracy), Some(g.precision)],
            );
        }
        for u in &a.usage {
            usage.add((u.subset.clone(), u.pedal.clone()), &[Some(u.percent)]);
        }
    }

    let mut traj_csv = String::from("modality_pair,axis,cos,nrmse_pct\n");
    let mut pedal_csv = String::from("platform,channel,f1,precision,recall,iou,lag_ms\n");
    let mut grasp_csv = String::from("modality_pair,iou,accuracy,precision\n");
    let mut usage_csv = String::from("subset,pedal,percent\n");
    let mut text = format!(
        "Validation report ({} trial(s), metrics averaged across trials)\n",
        analyses.len()
    );

    text.push_str("\nTrajectory agreement\n");
    let _ = writeln!(
        text,
        "{:<24} {:<6} {:>8} {:>10}",
        "pair", "axis", "CoS", "NRMSE %"
    );
    for ((pair, axis), m) in traj.means() {
        let _ = writeln!(traj_csv, "{pair},{axis},{},{}", num(m[0]), num(m[1]));
        let _ = writeln!(
            text,
            "{pair:<24} {axis:<6} {:>8} {:>10}",
            txt(m[0]),
            txt(m[1])
        );
    }

    text.push_str("\nPedal detection\n");
    let _ = writeln!(
        text,
        "{:<12} {:<8} {:>7} {:>9} {:>7} {:>7} {:>9}",
        "platform", "channel", "F1", "precision", "recall", "IoU", "lag ms"
    );
    for ((platform, channel), m) in pedal.means() {
        let _ = writeln!(
            pedal_csv,
            "{platform},{channel},{},{},{},{},{}",
            num(m[0]),
            num(m[1]),
            num(m[2]),
            num(m[3]),
            num(m[4])
        );
        let _ = writeln!(
            text,
            "{platform:<12} {channel:<8} {:>7} {:>9} {:>7} {:>7} {:>9}",
            txt(m[0]),
            txt(m[1]),
            txt(m[2]),
            txt(m[3]),
            txt(m[4])
        );
    }

    text.push_str("\nGrasper state\n");
    let _ = writeln!(
        text,
        "{:<16} {:>7} {:>9} {:>9}",
        "pair", "IoU", "accuracy", "precision"
    );
    for (pair, m) in grasp.means() {
        let _ = writeln!(
            grasp_csv,
            "{pair},{},{},{}",
            num(m[0]),
            num(m[1]),
            num(m[2])
        );
        let _ = writeln!(
            text,
            "{pair:<16} {:>7} {:>9} {:>9}",
            txt(m[0]),
            txt(m[1]),
            txt(m[2])
        );
    }

    text.push_str("\nPedal usage (%)\n");
    for ((subset, pedal), m) in usage.means() {
        let _ = writeln!(usage_csv, "{subset},{pedal},{}", num(m[0]));
        let _ = writeln!(text, "{subset:<8} {pedal:<28} {:>7}", txt(m[0]));
    }

    Ok(Report {
        trials: analyses.len(),
        files: vec![
            ("trajectory_metrics.csv".into(), traj_csv),
            ("pedal_metrics.csv".into(), pedal_csv),
            ("grasper_metrics.csv".into(), grasp_csv),
            ("usage.csv".into(), usage_csv),
            ("report.txt".into(), text),
        ],
    })
}

/// Writes every report file into `dir` (created if missing).
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    create_dir_all(dir)?;
    for (name, content) in &report.files {
        write_atomic(&dir.join(name), content.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analysis(name: &str, cos: f64) -> TrialAnalysis {
        TrialAnalysis {
            trial: name.into(),
            trajectories: vec![(
                "EmHT-MTM".into(),
                vec![AxisMetric {
                    axis: "X".into(),
                    cos,
                    nrmse_pct: 10.0 * cos,
                }],
            )],
            pedals: vec![PedalRow {
                platform: "sim".into(),
                channel: "all".into(),
                f1: cos,
                precision: 1.0,
                recall: 1.0,
                iou: 1.0,
                lag_ms: None,
            }],
            graspers: vec![],
            usage: vec![],
        }
    }

    #[test]
    fn averages_and_is_deterministic() {
        let r = build_report(&[analysis("a", 0.8), analysis("b", 0.6)]).unwrap();
        let t = r.file("trajectory_metrics.csv").unwrap();
        assert_eq!(
            t,
            "modality_pair,axis,cos,nrmse_pct\nEmHT-MTM,X,0.700000,7.000000\n"
        );
        assert!(r
            .file("pedal_metrics.csv")
            .unwrap()
            .ends_with("sim,all,0.700000,1.000000,1.000000,1.000000,\n"));
        assert_eq!(
            r,
            build_report(&[analysis("a", 0.8), analysis("b", 0.6)]).unwrap()
        );
    }

    #[test]
    fn single_trial_equals_itself() {
        let r = build_report(&[analysis("a", 0.9)]).unwrap();
        assert!(r
            .file("trajectory_metrics.csv")
            .unwrap()
            .contains("0.900000,9.000000"));
        assert!(build_report(&[]).is_err());
    }
}
