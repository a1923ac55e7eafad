//! Voltage thresholding and F1-maximizing threshold search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Confusion;

/// Number of evenly spaced candidate thresholds between the trace minimum and maximum.
pub const DEFAULT_GRID_POINTS: usize = 64;

/// Which side of the threshold counts as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Positive where `value >= threshold` (pedal voltages).
    AtOrAbove,
    /// Positive where `value < threshold` (finger distance when closed).
    Below,
}

impl Direction {
    pub fn classify(self, value: f64, threshold: f64) -> u8 {
        u8::from(match self {
            Direction::AtOrAbove => value >= threshold,
            Direction::Below => value < threshold,
        })
    }
}

/// Pressed (1) where the voltage is at or above the threshold.
pub fn binarize_pedal(voltages: &[f64], threshold: f64) -> Vec<u8> {
    voltages
        .iter()
        .map(|&v| Direction::AtOrAbove.classify(v, threshold))
        .collect()
}

/// `n` evenly spaced points over `[min, max]` of `values`.
pub fn threshold_grid(values: &[f64], n: usize) -> Result<Vec<f64>> {
    if values.is_empty() || n < 2 {
        return Err(Error::invalid(
            "threshold grid needs values and at least 2 points",
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in calibration trace"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub threshold: f64,
    pub f1: f64,
}

/// Grid threshold maximizing frame-level F1 against `truth`, ties going to
/// the lowest threshold. F1 values are compared as exact fractions.
pub fn calibrate_threshold(
    values: &[f64],
    truth: &[u8],
    grid: &[f64],
    direction: Direction,
) -> Result<ThresholdFit> {
    if values.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: truth.len(),
        });
    }
    let positives = truth.iter().filter(|&&t| t != 0).count();
    if positives == 0 || positives == truth.len() {
        return Err(Error::Degenerate(
            "calibration labels need both classes".into(),
        ));
    }
    let mut best: Option<(f64, (u64, u64))> = None;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &th in &sorted {
        let pred: Vec<u8> = values.iter().map(|&v| direction.classify(v, th)).collect();
        let f = Confusion::count(&pred, truth)?.f1_fraction();
        let better = match best {
            None => true,
            Some((_, b)) => (f.0 as u128) * (b.1 as u128) > (b.0 as u128) * (f.1 as u128),
        };
        if better {
            best = Some((th, f));
        }
    }
    let (threshold, (num, den)) = best.ok_or_else(|| Error::invalid("empty threshold grid"))?;
    Ok(ThresholdFit {
        threshold,
        f1: if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        },
    })
}

/// Pedal threshold over the default 64-point grid of the trace.
pub fn calibrate_pedal_threshold(voltages: &[f64], truth: &[u8]) -> Result<ThresholdFit> {
    let grid = threshold_grid(voltages, DEFAULT_GRID_POINTS)?;
    calibrate_threshold(voltages, truth, &grid, Direction::AtOrAbove)
}
