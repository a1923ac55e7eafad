//! Grasper open/closed state from the distance between two finger sensors.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::pedal::{
    calibrate_threshold, threshold_grid, Direction, ThresholdFit, DEFAULT_GRID_POINTS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrasperEstimatorConfig {
    /// Moving-average window in samples.
    pub window: usize,
    pub threshold_cm: f64,
    pub closed_value: u8,
}

impl Default for GrasperEstimatorConfig {
    fn default() -> Self {
        GrasperEstimatorConfig {
            window: 15,
            threshold_cm: 4.0,
            closed_value: 1,
        }
    }
}

impl GrasperEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("moving-average window must be >= 1"));
        }
        if !(self.threshold_cm.is_finite() && self.threshold_cm > 0.0) {
            return Err(Error::invalid("grasper threshold must be > 0"));
        }
        Ok(())
    }
}

/// Centered moving average; the window is truncated at the series ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let before = (window.max(1) - 1) / 2;
    let after = window.max(1) / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn sensor_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).norm()).collect())
}

/// Binarizes an already-filtered distance series: closed where below the threshold.
pub fn classify_filtered(filtered: &[f64], cfg: &GrasperEstimatorConfig) -> Vec<u8> {
    filtered
        .iter()
        .map(|&d| {
            if Direction::Below.classify(d, cfg.threshold_cm) == 1 {
                cfg.closed_value
            } else {
                0
            }
        })
        .collect()
}

/// Distance → centered moving average → closed where below the threshold.
pub fn estimate_grasper_state(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
    cfg: &GrasperEstimatorConfig,
) -> Result<Vec<u8>> {
    cfg.validate()?;
    let d = sensor_distance(a, b)?;
    Ok(classify_filtered(&moving_average(&d, cfg.window), cfg))
}

/// F1-maximizing threshold over the filtered distance, reusing the pedal grid search.
pub fn calibrate_grasper_threshold(filtered: &[f64], truth: &[u8]) -> Result<ThresholdFit> {
    let grid = threshold_grid(filtered, DEFAULT_GRID_POINTS)?;
    calibrate_threshold(filtered, truth, &grid, Direction::Below)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(d: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let a = d.iter().map(|_| Vector3::zeros()).collect();
        let b = d.iter().map(|&x| Vector3::new(0.0, x, 0.0)).collect();
        (a, b)
    }

    #[test]
    fn constant_open() {
        let (a, b) = pair(&[6.0; 40]);
        let s = estimate_grasper_state(&a, &b, &Default::default()).unwrap();
        assert!(s.iter().all(|&v| v == 0));
    }

    #[test]
    fn spike_suppressed() {
        let mut d = vec![6.0; 40];
        d[20] = 0.0;
        let (a, b) = pair(&d);
        let s = estimate_grasper_state(&a, &b, &Default::default()).unwrap();
        assert!(s.iter().all(|&v| v == 0));
    }

    #[test]
    fn square_wave() {
        let d: Vec<f64> = (0..300)
            .map(|i| if (i / 60) % 2 == 1 { 2.0 } else { 6.0 })
            .collect();
        let (a, b) = pair(&d);
        let s = estimate_grasper_state(&a, &b, &Default::default()).unwrap();
        let truth: Vec<u8> = d.iter().map(|&x| u8::from(x < 4.0)).collect();
        assert_eq!(s, truth);
    }

    #[test]
    fn moving_average_edges() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 3), vec![1.5, 2.0, 2.5]);
        assert_eq!(moving_average(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn errors() {
        let (a, b) = pair(&[1.0, 2.0]);
        assert!(estimate_grasper_state(&a, &b[..1], &Default::default()).is_err());
        let cfg = GrasperEstimatorConfig {
            window: 0,
            ..Default::default()
        };
        assert!(estimate_grasper_state(&a, &b, &cfg).is_err());
    }
}
